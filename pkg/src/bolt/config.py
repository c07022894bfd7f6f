"""Run configuration: TOML sections with explicit defaults and load-time validation."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import DatasetError, SyntheticSpec
from .evaluation import FinetuneConfig
from .framework import ModelConfig, TrainConfig
from .patch_embed import ConfigError, PatchEmbedConfig


@dataclass
class DataSection:
    source: str = "synthetic"  # "synthetic" or a path to an image folder
    seed: int = 0
    num_classes: int = 3
    per_class: int = 285
    H: int = 32
    W: int = 32
    C: int = 3
    # three stripe orientations with random shift/contrast: hard enough that raw features do not saturate a probe
    pattern_kind: list[str] = field(default_factory=lambda: ["stripe"])
    noise_std: float = 0.2
    jitter: int = 16
    contrast_range: list[float] = field(default_factory=lambda: [0.1, 0.5])
    ratios: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    balance_per_class: int = 0  # 0 disables class balancing


@dataclass
class ModelSection:
    P: int = 8
    D: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    proj_hidden: int = 256
    proj_dim: int = 64
    pixel_mean: float = 0.5
    pixel_std: float = 0.25
    init_seed: int = 0


@dataclass
class PerturbSection:
    M: int = 4
    identity: bool = False


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    weight_decay: float = 1e-4
    tau: float = 0.996
    tau_schedule: str = "cosine"
    alpha: float = 0.1
    normalize_loss: bool = True
    perturb_seed: int = 0
    batch_seed: int = 0
    checkpoint_every: int = 500


@dataclass
class EvalSection:
    probe_epochs: int = 200
    probe_lr: float = 0.05
    probe_seed: int = 0
    finetune_epochs: int = 30
    finetune_batch_size: int = 32
    finetune_lr: float = 1e-3
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    fractions: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.1])
    uniform_per_class: int = 0  # 0 keeps the whole test split


@dataclass
class IOSection:
    checkpoint_dir: str = "runs/checkpoints"
    metrics_path: str = "runs/metrics.csv"
    results_path: str = "runs/results.csv"


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "perturb": PerturbSection,
    "train": TrainSection,
    "eval": EvalSection,
    "io": IOSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    perturb: PerturbSection = field(default_factory=PerturbSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IOSection = field(default_factory=IOSection)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            embed=PatchEmbedConfig(self.data.H, self.data.W, self.data.C, m.P, m.D),
            depth=m.depth,
            heads=m.heads,
            mlp_ratio=m.mlp_ratio,
            M=self.perturb.M,
            proj_hidden=m.proj_hidden,
            proj_dim=m.proj_dim,
            identity_perturb=self.perturb.identity,
            pixel_mean=m.pixel_mean,
            pixel_std=m.pixel_std,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr=t.lr,
            lr_schedule=t.lr_schedule,
            weight_decay=t.weight_decay,
            alpha=t.alpha,
            tau_base=t.tau,
            tau_schedule=t.tau_schedule,
            total_steps=t.steps,
            normalize=t.normalize_loss,
            perturb_seed=t.perturb_seed,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(
            num_classes=d.num_classes,
            per_class=d.per_class,
            shape=(d.H, d.W, d.C),
            pattern_kind=tuple(d.pattern_kind),
            noise_std=d.noise_std,
            seed=d.seed,
            jitter=d.jitter,
            contrast_range=tuple(d.contrast_range),
        )

    def finetune_config(self, seed: int = 0) -> FinetuneConfig:
        e = self.eval
        return FinetuneConfig(e.finetune_epochs, e.finetune_batch_size, e.finetune_lr, self.train.weight_decay, seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        """Check every cross-field constraint before any numeric module sees the values."""
        try:
            self.model_config()
            self.train_config()
            if self.data.source == "synthetic":
                self.synthetic_spec().validate()
        except DatasetError as exc:
            raise ConfigError(str(exc)) from exc
        r = self.data.ratios
        if len(r) != 3 or any(x <= 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
            raise ConfigError(f"data.ratios must be three positive numbers summing to 1, got {r}")
        if self.data.balance_per_class < 0:
            raise ConfigError("data.balance_per_class must be >= 0")
        t = self.train
        if t.steps < 0 or t.batch_size < 1 or t.checkpoint_every < 1:
            raise ConfigError("train.steps >= 0, train.batch_size >= 1 and train.checkpoint_every >= 1 required")
        e = self.eval
        if not e.seeds:
            raise ConfigError("eval.seeds must not be empty")
        if any(not 0 < f <= 1 for f in e.fractions):
            raise ConfigError("eval.fractions must lie in (0, 1]")
        if e.probe_epochs < 0 or e.finetune_epochs < 0 or e.finetune_batch_size < 1:
            raise ConfigError("eval epochs must be >= 0 and batch size >= 1")
        return self


def _coerce(section: str, f, value: Any) -> Any:
    default = f.default_factory() if callable(f.default_factory) else f.default
    name = f"{section}.{f.name}"
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{name} must be an integer")
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{name} must be an integer") from exc
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(f"{name} must be a number")
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name} must be a number") from exc
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
        elem = type(default[0]) if default else str
        try:
            return [elem(v) for v in value]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name} has an element of the wrong type") from exc
    return str(value)


def config_from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for sec_name, body in doc.items():
        if sec_name not in SECTIONS:
            raise ConfigError(f"unknown key {sec_name!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{sec_name!r} must be a section")
        known = {f.name: f for f in fields(SECTIONS[sec_name])}
        updates = {}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown key '{sec_name}.{key}'")
            updates[key] = _coerce(sec_name, known[key], value)
        setattr(cfg, sec_name, replace(getattr(cfg, sec_name), **updates))
    return cfg.validate()


def parse_config(path: str | Path | None) -> RunConfig:
    """Read a TOML run configuration; ``None`` yields the all-defaults config."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such config file") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: malformed TOML ({exc})") from exc
    return config_from_dict(doc)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides (command-line values win over the file)."""
    doc = cfg.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        if sec not in doc or key not in doc[sec]:
            raise ConfigError(f"unknown key {dotted!r}")
        doc[sec][key] = value
    return config_from_dict(doc)
