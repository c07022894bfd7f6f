"""Linear probing, finetuning, ACC / macro-F1 metrics and strategy comparison tables."""

from __future__ import annotations

import copy
import csv
import logging
import os
import statistics
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .data import DatasetError, LabeledDataset, balance_classes, subsample_fraction
from .framework import Branch, ModelConfig, build_online, image_patches
from .patch_embed import PatchEmbed
from .vit import ViT, init_weights

logger = logging.getLogger(__name__)

INITS = ("scratch", "bolt", "bolt-no-diff")
RESULTS_HEADER = ["strategy", "label_fraction", "acc", "f1_macro", "seed_count"]


@dataclass
class EvalResult:
    acc: float  # percent
    f1_macro: float  # percent
    per_class_f1: np.ndarray
    confusion: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, EvalResult)
            and self.acc == other.acc
            and self.f1_macro == other.f1_macro
            and np.array_equal(self.per_class_f1, other.per_class_f1)
            and np.array_equal(self.confusion, other.confusion)
        )


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return conf


def metrics_from_confusion(conf: np.ndarray) -> EvalResult:
    """Rows are true classes, columns predictions. F1 of a class is 0 when P + R = 0."""
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf).astype(np.float64)
    pred_tot = conf.sum(axis=0)
    true_tot = conf.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    total = conf.sum()
    acc = 100.0 * tp.sum() / total if total else 0.0
    return EvalResult(float(acc), float(100.0 * f1.mean()), 100.0 * f1, conf)


def evaluate_predictions(y_true, y_pred, num_classes: int) -> EvalResult:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


@torch.no_grad()
def extract_features(encode: Callable[[torch.Tensor], torch.Tensor], ds: LabeledDataset, batch_size: int = 256) -> torch.Tensor:
    images = torch.as_tensor(ds.images)
    return torch.cat([encode(images[s]) for s in _batches(len(ds), batch_size)]).float()


def _encoder_fn(encoder) -> Callable[[torch.Tensor], torch.Tensor]:
    if isinstance(encoder, Branch):
        encoder.eval()
        return encoder.encode_images
    return encoder


def linear_probe(
    encoder,
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    seed: int = 0,
    epochs: int = 200,
    lr: float = 0.05,
) -> EvalResult:
    """Fit a softmax-regression head on frozen class-token features.

    ``encoder`` is a ``Branch`` (its unperturbed image path is used) or any
    callable mapping an image batch to features. Features are standardised
    with training statistics; the head sees the full training set each epoch.
    """
    missing = set(range(train_set.num_classes)) - set(np.unique(train_set.labels).tolist())
    if missing:
        raise DatasetError(f"classes {sorted(missing)} are absent from the probe training set")
    encode = _encoder_fn(encoder)
    x_tr = extract_features(encode, train_set)
    x_te = extract_features(encode, test_set)
    mu, sd = x_tr.mean(0), x_tr.std(0, unbiased=False).clamp_min(1e-6)
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    y_tr = torch.as_tensor(train_set.labels)

    gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(x_tr.shape[1], train_set.num_classes)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.01, generator=gen)
        head.bias.zero_()
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        F.cross_entropy(head(x_tr), y_tr).backward()
        opt.step()
    with torch.no_grad():
        pred = head(x_te).argmax(-1).numpy()
    return evaluate_predictions(test_set.labels, pred, test_set.num_classes)


class Classifier(nn.Module):
    """Patch embedding + encoder + linear head on the class token (no perturbation)."""

    def __init__(self, cfg: ModelConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.embed)
        self.encoder = ViT(cfg.vit)
        self.head = nn.Linear(cfg.embed.D, num_classes)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.embed.attach(self.embed(image_patches(images, self.cfg))))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images))

    @torch.no_grad()
    def predict(self, images, batch_size: int = 256) -> np.ndarray:
        self.eval()
        images = torch.as_tensor(np.asarray(images))
        return torch.cat([self(images[s]).argmax(-1) for s in _batches(len(images), batch_size)]).numpy()


def build_classifier(cfg: ModelConfig, num_classes: int, seed: int = 0, init_from: Branch | None = None) -> Classifier:
    """Fresh head seeded by ``seed``; embed/encoder copied from ``init_from`` or randomly initialised."""
    gen = torch.Generator().manual_seed(seed)
    model = Classifier(cfg, num_classes)
    if init_from is None:
        source = build_online(cfg, seed)
    else:
        source = init_from
    model.embed.load_state_dict(source.embed.state_dict())
    model.encoder.load_state_dict(source.encoder.state_dict())
    init_weights(model.head, gen)
    return model


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class FinetuneResult:
    model: Classifier
    best_val_acc: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def finetune(model: Classifier, train_set: LabeledDataset, val_set: LabeledDataset, cfg: FinetuneConfig) -> FinetuneResult:
    """Train every parameter with cross-entropy; keep the epoch with the best validation ACC (latest on ties)."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise DatasetError("finetune needs non-empty train and val splits")
    if set(train_set.ids) & set(val_set.ids):
        raise DatasetError("train and val splits overlap")
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    x = torch.as_tensor(train_set.images)
    y = torch.as_tensor(train_set.labels)

    def val_acc() -> float:
        return evaluate(model, val_set).acc

    best_acc, best_epoch = val_acc(), 0
    best_state = copy.deepcopy(model.state_dict())
    history = [{"epoch": 0, "val_acc": best_acc}]
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        total = 0.0
        for s in _batches(len(order), cfg.batch_size):
            idx = torch.as_tensor(order[s])
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        acc = val_acc()
        history.append({"epoch": epoch, "train_loss": total / len(order), "val_acc": acc})
        if acc >= best_acc:  # ties go to the later, more trained epoch
            best_acc, best_epoch = acc, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return FinetuneResult(model, best_acc, best_epoch, history)


def evaluate(model: Classifier, test_set: LabeledDataset) -> EvalResult:
    if test_set.labels is None:
        raise DatasetError("evaluation requires a labeled test set")
    return evaluate_predictions(test_set.labels, model.predict(test_set.images), test_set.num_classes)


def uniform_test_subsample(test_set: LabeledDataset, per_class: int, seed: int = 0) -> LabeledDataset:
    """Equal number of test images per class; short classes are taken whole with a warning."""
    counts = test_set.class_counts()
    for c, n in enumerate(counts):
        if n < per_class:
            logger.warning("class %d has only %d test samples (< %d); taking all", c, n, per_class)
    return balance_classes(test_set, per_class, seed)


@dataclass(frozen=True)
class StrategySpec:
    name: str
    init: str
    label_fraction: float = 1.0

    def __post_init__(self):
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}; choose from {INITS}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must lie in (0, 1]")


def cell_seed(base_seed: int, name: str, fraction: float) -> int:
    return zlib.crc32(f"{base_seed}|{name}|{fraction!r}".encode())


@dataclass
class ComparisonRow:
    strategy: str
    label_fraction: float
    acc: float
    f1_macro: float
    seed_count: int
    results: list[EvalResult] = field(default_factory=list, repr=False)


def run_comparison(
    specs: Sequence[StrategySpec],
    train_set: LabeledDataset,
    val_set: LabeledDataset,
    test_set: LabeledDataset,
    model_cfg: ModelConfig,
    seeds: Sequence[int] = (0, 1, 2),
    pretrained: dict[str, Sequence[Branch]] | None = None,
    ft_cfg: FinetuneConfig | None = None,
    workers: int | None = None,
) -> list[ComparisonRow]:
    """Finetune + test every spec for every seed; cells report the median over seeds.

    ``pretrained`` maps an init name to one or more pretrained branches; seed
    ``i`` uses entry ``i % len``. Cells run in parallel on ``workers`` threads
    (``BOLT_THREADS`` by default).
    """
    pretrained = pretrained or {}
    ft_cfg = ft_cfg or FinetuneConfig()
    for spec in specs:
        if spec.init != "scratch" and not pretrained.get(spec.init):
            raise FileNotFoundError(f"strategy {spec.name!r}: no pretrained checkpoint for init {spec.init!r}")

    def run_cell(spec: StrategySpec) -> ComparisonRow:
        results = []
        for i, seed in enumerate(seeds):
            cs = cell_seed(seed, spec.name, spec.label_fraction)
            subset = subsample_fraction(train_set, spec.label_fraction, cs)
            source = None if spec.init == "scratch" else pretrained[spec.init][i % len(pretrained[spec.init])]
            model = build_classifier(model_cfg, train_set.num_classes, seed=cs, init_from=source)
            cfg = FinetuneConfig(ft_cfg.epochs, ft_cfg.batch_size, ft_cfg.lr, ft_cfg.weight_decay, cs)
            fitted = finetune(model, subset, val_set, cfg).model
            results.append(evaluate(fitted, test_set))
        return ComparisonRow(
            spec.name,
            spec.label_fraction,
            float(statistics.median(r.acc for r in results)),
            float(statistics.median(r.f1_macro for r in results)),
            len(results),
            results,
        )

    workers = workers or int(os.environ.get("BOLT_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_cell, specs))
    return [run_cell(s) for s in specs]


def write_results_csv(path: str | Path, rows: Sequence[ComparisonRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([r.strategy, repr(r.label_fraction), f"{r.acc:.4f}", f"{r.f1_macro:.4f}", r.seed_count])
    return path


def format_table(rows: Sequence[ComparisonRow]) -> str:
    """Strategies as rows, label fractions as columns, cells ``ACC/F1``."""
    fractions = sorted({r.label_fraction for r in rows}, reverse=True)
    names = list(dict.fromkeys(r.strategy for r in rows))
    cell = {(r.strategy, r.label_fraction): r for r in rows}
    lines = ["strategy".ljust(16) + "".join(f"{int(round(f * 100))}%".rjust(16) for f in fractions)]
    for n in names:
        parts = []
        for f in fractions:
            r = cell.get((n, f))
            parts.append((f"{r.acc:.1f}/{r.f1_macro:.1f}" if r else "-").rjust(16))
        lines.append(n.ljust(16) + "".join(parts))
    return "\n".join(lines)
