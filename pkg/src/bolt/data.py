"""Datasets: synthetic generation, image-folder ingestion and seeded stratified sampling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PATTERN_KINDS = ("blob", "stripe", "checker")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".ppm", ".pgm"}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # H x W x C, float32 in [0, 1]
    label: int | None
    id: str


@dataclass
class LabeledDataset:
    """Images stored as one stacked ``(n, H, W, C)`` float32 array.

    ``labels`` is ``None`` for an unlabeled (proxy) set.
    """

    images: np.ndarray
    labels: np.ndarray | None
    ids: list[str]
    num_classes: int
    provenance: str = ""
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (n, H, W, C), got shape {self.images.shape}")
        if len(self.ids) != len(self.images):
            raise DatasetError("ids and images differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError("sample ids are not unique")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise DatasetError("labels and images differ in length")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> ImageSample:
        label = None if self.labels is None else int(self.labels[i])
        return ImageSample(self.images[i], label, self.ids[i])

    def __iter__(self) -> Iterator[ImageSample]:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list[ImageSample]:
        return list(self)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx],
            labels=None if self.labels is None else self.labels[idx],
            ids=[self.ids[i] for i in idx],
            num_classes=self.num_classes,
            provenance=self.provenance,
            class_names=list(self.class_names),
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self._require_labels(), minlength=self.num_classes)

    def class_indices(self) -> list[np.ndarray]:
        labels = self._require_labels()
        return [np.flatnonzero(labels == c) for c in range(self.num_classes)]

    def _require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise DatasetError("operation requires a labeled dataset")
        return self.labels


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a class-conditional synthetic image set.

    ``pattern_kind`` is either one kind shared by every class (classes then
    differ by a per-class variant of the pattern) or a sequence assigning a
    kind per class, cycled. ``jitter`` is the maximum random circular shift
    in pixels applied per sample and ``contrast_range`` scales the template
    amplitude per sample; both default to no nuisance variation.
    """

    num_classes: int = 3
    per_class: int = 200
    shape: tuple[int, int, int] = (32, 32, 3)
    pattern_kind: str | tuple[str, ...] = PATTERN_KINDS
    noise_std: float = 0.05
    seed: int = 0
    jitter: int = 0
    contrast_range: tuple[float, float] = (1.0, 1.0)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")
        if self.per_class < 1:
            raise DatasetError("per_class must be >= 1")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise DatasetError(f"invalid shape {self.shape}; expected positive (H, W, C)")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be >= 0")
        for kind in self.kinds():
            if kind not in PATTERN_KINDS:
                raise DatasetError(f"unknown pattern kind {kind!r}; choose from {PATTERN_KINDS}")
        lo, hi = self.contrast_range
        if not 0 <= lo <= hi:
            raise DatasetError("contrast_range must satisfy 0 <= lo <= hi")
        if self.jitter < 0:
            raise DatasetError("jitter must be >= 0")

    def kinds(self) -> tuple[str, ...]:
        if isinstance(self.pattern_kind, str):
            return (self.pattern_kind,)
        return tuple(self.pattern_kind)


def _template(kind: str, variant: int, n_variants: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    if kind == "blob":
        angle = 2 * math.pi * variant / max(n_variants, 1) + math.pi / 4
        cy, cx = 0.5 + 0.25 * math.sin(angle), 0.5 + 0.25 * math.cos(angle)
        return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.12**2))
    if kind == "stripe":
        theta = math.pi * variant / max(n_variants, 1)
        phase = 2 * math.pi * 4 * (xx * math.cos(theta) + yy * math.sin(theta))
        return 0.5 + 0.5 * np.sin(phase)
    # checker: cell side shrinks with the variant index
    cells = 2 + 2 * variant
    return ((np.floor(yy * cells) + np.floor(xx * cells)) % 2).astype(np.float64)


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """Noise-free per-class template, ``(num_classes, H, W)`` in [0, 1]."""
    h, w, _ = spec.shape
    kinds = spec.kinds()
    out = np.empty((spec.num_classes, h, w))
    for c in range(spec.num_classes):
        kind = kinds[c % len(kinds)]
        same_kind = [k for k in range(spec.num_classes) if kinds[k % len(kinds)] == kind]
        out[c] = _template(kind, same_kind.index(c), len(same_kind), h, w)
    return out


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    spec.validate()
    h, w, ch = spec.shape
    rng = np.random.default_rng(spec.seed)
    templates = class_templates(spec)
    n = spec.num_classes * spec.per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)

    amp = rng.uniform(*spec.contrast_range, size=n)
    if spec.jitter:
        shifts = rng.integers(-spec.jitter, spec.jitter + 1, size=(n, 2))
    else:
        shifts = np.zeros((n, 2), dtype=np.int64)
    noise = rng.normal(0.0, 1.0, size=(n, h, w, ch)) * spec.noise_std

    images = np.empty((n, h, w, ch), dtype=np.float32)
    for i in range(n):
        base = np.roll(templates[labels[i]], shift=tuple(shifts[i]), axis=(0, 1))
        img = 0.5 + amp[i] * (base - 0.5)
        images[i] = np.clip(img[:, :, None] + noise[i], 0.0, 1.0)

    ids = [f"syn-{spec.seed}-{i:06d}" for i in range(n)]
    kinds = spec.kinds()
    names = [f"{kinds[c % len(kinds)]}{c}" for c in range(spec.num_classes)]
    return LabeledDataset(images, labels, ids, spec.num_classes, provenance=f"synthetic:{spec}", class_names=names)


def load_image_folder(path: str | Path, shape: tuple[int, int, int] = (32, 32, 3)) -> LabeledDataset:
    """Read ``root/<class_name>/<image>``; classes are numbered in lexicographic order."""
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class directories")

    h, w, ch = shape
    images, labels, ids = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"{cdir}: empty class directory")
        for f in files:
            try:
                with Image.open(f) as im:
                    im.load()
                    arr = _to_array(im, h, w, ch)
            except (UnidentifiedImageError, OSError, SyntaxError) as exc:
                raise DatasetError(f"{f}: unreadable image ({exc})") from exc
            images.append(arr)
            labels.append(label)
            ids.append(f"{cdir.name}/{f.name}")

    return LabeledDataset(
        np.stack(images),
        np.asarray(labels),
        ids,
        num_classes=len(class_dirs),
        provenance=f"folder:{root}",
        class_names=[d.name for d in class_dirs],
    )


def _to_array(im, h: int, w: int, ch: int) -> np.ndarray:
    mode = "L" if ch == 1 or im.mode in ("L", "LA", "I", "I;16", "F", "1") else "RGB"
    im = im.convert(mode).resize((w, h), resample=2)  # bilinear
    arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] != ch:
        if arr.shape[2] == 1:
            arr = np.repeat(arr, ch, axis=2)
        else:
            arr = arr[:, :, :ch] if ch < arr.shape[2] else np.repeat(arr.mean(axis=2, keepdims=True), ch, axis=2)
    return arr


def save_image_folder(ds: LabeledDataset, root: str | Path) -> Path:
    """Write a labeled dataset as 8-bit PNGs in the layout ``load_image_folder`` reads."""
    from PIL import Image

    root = Path(root)
    names = ds.class_names or [f"class{c}" for c in range(ds.num_classes)]
    for sample in ds:
        d = root / names[sample.label]
        d.mkdir(parents=True, exist_ok=True)
        arr = np.round(sample.pixels * 255).astype(np.uint8)
        Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(d / f"{sample.id.replace('/', '_')}.png")
    return root


def _check_partition_ratios(ratios: Sequence[float]) -> None:
    if any(r <= 0 for r in ratios):
        raise DatasetError("ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1 (got {sum(ratios)})")


def split_dataset(
    ds: LabeledDataset,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified train/val/test split; val and test take the floor, train the remainder (capped at +1)."""
    _check_partition_ratios(ratios)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c, idx in enumerate(ds.class_indices()):
        if len(idx) < len(ratios):
            raise DatasetError(f"class {c} has {len(idx)} samples, fewer than {len(ratios)} partitions")
        idx = rng.permutation(idx)
        n_val = math.floor(len(idx) * ratios[1] + 1e-9)
        n_test = math.floor(len(idx) * ratios[2] + 1e-9)
        n_train = len(idx) - n_val - n_test
        if n_train - len(idx) * ratios[0] > 1 + 1e-9:
            # floors dropped almost two samples onto train; hand one back to keep every share within 1
            if len(idx) * ratios[1] - n_val >= len(idx) * ratios[2] - n_test:
                n_val += 1
            else:
                n_test += 1
            n_train -= 1
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train : n_train + n_val])
        parts[2].extend(idx[n_train + n_val :])
    return tuple(ds.subset(np.sort(p)) for p in parts)


def kfold_indices(ds: LabeledDataset, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k folds as ``(train_idx, test_idx)`` pairs."""
    if k < 2:
        raise DatasetError("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for idx in ds.class_indices():
        for j, chunk in enumerate(np.array_split(rng.permutation(idx), k)):
            folds[j].extend(chunk)
    everything = np.arange(len(ds))
    out = []
    for fold in folds:
        test = np.sort(np.asarray(fold, dtype=np.int64))
        out.append((np.setdiff1d(everything, test), test))
    return out


def _per_class_draw(ds: LabeledDataset, counts: Sequence[int], seed: int) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    keep = []
    for idx, n in zip(ds.class_indices(), counts):
        keep.extend(rng.choice(idx, size=n, replace=False) if n < len(idx) else idx)
    return ds.subset(np.sort(np.asarray(keep, dtype=np.int64)))


def balance_classes(ds: LabeledDataset, per_class_count: int, seed: int = 0) -> LabeledDataset:
    """Draw ``min(per_class_count, available)`` samples per class without replacement."""
    if per_class_count < 1:
        raise DatasetError("per_class_count must be >= 1")
    if len(ds) == 0:
        raise DatasetError("cannot balance an empty dataset")
    counts = [min(per_class_count, int(n)) for n in ds.class_counts()]
    return _per_class_draw(ds, counts, seed)


def subsample_fraction(ds: LabeledDataset, fraction: float, seed: int = 0) -> LabeledDataset:
    """Stratified draw of ``round(fraction * class_size)`` per class (half rounds up)."""
    if not 0 < fraction <= 1:
        raise DatasetError(f"fraction must lie in (0, 1], got {fraction}")
    counts = [math.floor(fraction * int(n) + 0.5) for n in ds.class_counts()]
    return _per_class_draw(ds, counts, seed)


def write_manifest(path: str | Path, splits: dict[str, LabeledDataset]) -> Path:
    """CSV with columns ``id,label,split``; unlabeled samples get an empty label."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "split"])
        for name, ds in splits.items():
            for sample in ds:
                writer.writerow([sample.id, "" if sample.label is None else sample.label, name])
    return path


def read_manifest(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
