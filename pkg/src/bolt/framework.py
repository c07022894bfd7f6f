"""Dual-branch BOLT training: heads, losses, stop-gradient, EMA target and the train step."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .patch_embed import ConfigError, PatchEmbed, PatchEmbedConfig, patchify
from .perturb import PerturbConfig, TokenPerturbation, difficulty_label, difficulty_score, sample_permutations
from .vit import ViT, ViTConfig, init_weights

PROB_EPS = 1e-7


class NumericalError(RuntimeError):
    def __init__(self, message: str, report: "TrainReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ModelConfig:
    embed: PatchEmbedConfig = field(default_factory=PatchEmbedConfig)
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    M: int = 4
    proj_hidden: int = 256
    proj_dim: int = 64
    identity_perturb: bool = False
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.pixel_std <= 0:
            raise ConfigError("pixel_std must be > 0")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.proj_hidden < 1 or self.proj_dim < 1:
            raise ConfigError("projector dims must be positive")
        if self.identity_perturb and self.M != self.embed.S:
            raise ConfigError("identity perturbation requires M == S")
        self.vit  # validates heads | D
        self.perturb

    @property
    def vit(self) -> ViTConfig:
        return ViTConfig(self.depth, self.heads, self.embed.D, self.mlp_ratio, self.embed.N)

    @property
    def perturb(self) -> PerturbConfig:
        return PerturbConfig(self.embed.N, self.embed.S, self.M)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["embed"] = PatchEmbedConfig(**d["embed"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    alpha: float = 0.1
    tau_base: float = 0.996
    tau_schedule: str = "cosine"  # or "constant"
    total_steps: int = 2000
    normalize: bool = True
    perturb_seed: int = 0
    lr_schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        if not 0.0 <= self.tau_base <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.tau_schedule not in ("cosine", "constant"):
            raise ConfigError("tau_schedule must be 'cosine' or 'constant'")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("lr_schedule must be 'cosine' or 'constant'")
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ConfigError("alpha must be finite and >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")


def image_patches(images: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """Standardise ``[0, 1]`` pixels with the configured mean/std, then patchify."""
    return patchify((images - cfg.pixel_mean) / cfg.pixel_std, cfg.embed)


class MLPHead(nn.Module):
    """linear -> LayerNorm -> GELU -> linear."""

    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.fc2 = nn.Linear(hidden, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.norm(self.fc1(x))))


class Branch(nn.Module):
    """Parameters shared in structure by both branches: embed, fusion, encoder, projector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.embed)
        self.perturb = TokenPerturbation(cfg.perturb, cfg.embed.D, identity=cfg.identity_perturb)
        self.encoder = ViT(cfg.vit)
        self.projector = MLPHead(cfg.embed.D, cfg.proj_hidden, cfg.proj_dim)

    def represent(self, tokens: torch.Tensor) -> torch.Tensor:
        """Class-token representation of ``(..., N, D)`` tokens (position/class attached here)."""
        return self.encoder(self.embed.attach(tokens))

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """Unperturbed path used downstream: image -> patches -> tokens -> representation."""
        return self.represent(self.embed(image_patches(images, self.cfg)))


class OnlineBranch(Branch):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.predictor = MLPHead(cfg.proj_dim, cfg.proj_hidden, cfg.proj_dim)
        self.difficulty_head = nn.Linear(2 * cfg.embed.D, 1)


def build_online(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> OnlineBranch:
    gen = torch.Generator().manual_seed(seed)
    online = OnlineBranch(cfg)
    online.embed.reset_parameters(gen)
    online.perturb.reset_parameters(gen)
    for part in (online.encoder, online.projector, online.predictor, online.difficulty_head):
        init_weights(part, gen)
    return online.to(dtype)


def make_target(online: OnlineBranch) -> Branch:
    """Target branch initialised as a copy of the online shared subset; never trained."""
    target = Branch(online.cfg).to(next(online.parameters()).dtype)
    target.load_state_dict(online.state_dict(), strict=False)
    target.requires_grad_(False)
    return target


def project(y: torch.Tensor, head: MLPHead) -> torch.Tensor:
    return head(y)


def predict(z: torch.Tensor, head: MLPHead) -> torch.Tensor:
    return head(z)


def similarity_loss(qz: torch.Tensor, z_target: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Squared distance between L2-normalised vectors, ``2 - 2 cos``; per row, range [0, 4].

    ``z_target`` is detached. ``normalize=False`` gives the raw squared distance.
    """
    if qz.shape != z_target.shape:
        raise ValueError(f"shape mismatch {tuple(qz.shape)} vs {tuple(z_target.shape)}")
    z_target = z_target.detach()
    if normalize:
        nq = qz.norm(dim=-1, keepdim=True)
        nz = z_target.norm(dim=-1, keepdim=True)
        if bool((nq == 0).any()) or bool((nz == 0).any()):
            raise ValueError("similarity_loss: zero-norm input cannot be normalised")
        qz, z_target = qz / nq, z_target / nz
    return ((qz - z_target) ** 2).sum(dim=-1)


def difficulty_logits(y_online: torch.Tensor, y_target: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return head(torch.cat([y_online, y_target.detach()], dim=-1)).squeeze(-1)


def difficulty_loss(y_online, y_target, y_self, head: nn.Linear) -> torch.Tensor:
    """Per-sample binary cross-entropy of ``p = sigmoid(FC([y_online, sg(y_target)]))``."""
    p = torch.sigmoid(difficulty_logits(y_online, y_target, head))
    return binary_cross_entropy(p, y_self)


def binary_cross_entropy(p: torch.Tensor, y) -> torch.Tensor:
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    y = torch.as_tensor(y, dtype=p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def total_loss(loss_bolt, loss_diff, alpha: float = 0.1):
    return loss_bolt + alpha * loss_diff


def ema_update(online: nn.Module, target: nn.Module, tau: float) -> None:
    """``xi <- tau * xi + (1 - tau) * theta`` over every target tensor."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    theta = dict(online.named_parameters())
    with torch.no_grad():
        for name, xi in target.named_parameters():
            src = theta.get(name)
            if src is None or src.shape != xi.shape:
                raise ConfigError(f"structural mismatch at target tensor {name!r}")
            if tau == 1.0:
                continue
            if tau == 0.0:
                xi.copy_(src)
            else:
                xi.mul_(tau).add_(src, alpha=1.0 - tau)


def tau_at(cfg: TrainConfig, step: int) -> float:
    if cfg.tau_schedule == "constant" or cfg.total_steps == 0:
        return cfg.tau_base
    frac = min(step, cfg.total_steps) / cfg.total_steps
    return 1.0 - (1.0 - cfg.tau_base) * (math.cos(math.pi * frac) + 1.0) / 2.0


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for update ``step`` (0-based): cosine decay from ``cfg.lr`` towards 0."""
    if cfg.lr_schedule == "constant" or cfg.total_steps == 0:
        return cfg.lr
    frac = min(step, cfg.total_steps) / cfg.total_steps
    return cfg.lr * (math.cos(math.pi * frac) + 1.0) / 2.0


@dataclass
class Views:
    z_o: torch.Tensor
    a: torch.Tensor
    b: torch.Tensor
    perm_a: np.ndarray
    perm_b: np.ndarray


@dataclass
class TargetOutputs:
    y_a: torch.Tensor
    z_a: torch.Tensor
    y_b: torch.Tensor
    z_b: torch.Tensor


@dataclass
class LossTerms:
    bolt: torch.Tensor
    diff: torch.Tensor
    total: torch.Tensor
    p_ab: torch.Tensor
    p_ba: torch.Tensor
    z_online: torch.Tensor


def make_views(online: Branch, patches: torch.Tensor, perm_a, perm_b) -> Views:
    z_o = online.embed(patches)
    return Views(z_o, online.perturb(z_o, perm_a), online.perturb(z_o, perm_b), perm_a, perm_b)


def view_labels(views: Views) -> tuple[torch.Tensor, torch.Tensor]:
    """Difficulty labels for (a->online, b->target) and the mirrored assignment."""
    z_o = views.z_o.detach()
    score_a = difficulty_score(views.a.detach(), views.perm_a, z_o)
    score_b = difficulty_score(views.b.detach(), views.perm_b, z_o)
    return difficulty_label(score_a, score_b), difficulty_label(score_b, score_a)


@torch.no_grad()
def target_outputs(target: Branch, view_a: torch.Tensor, view_b: torch.Tensor) -> TargetOutputs:
    y_a = target.represent(view_a.detach())
    y_b = target.represent(view_b.detach())
    return TargetOutputs(y_a, target.projector(y_a), y_b, target.projector(y_b))


def online_losses(
    online: OnlineBranch,
    view_a: torch.Tensor,
    view_b: torch.Tensor,
    targets: TargetOutputs,
    label_ab,
    label_ba,
    alpha: float = 0.1,
    normalize: bool = True,
) -> LossTerms:
    """Batch-mean losses with the target side held constant.

    The bolt loss sums both view assignments; the difficulty loss averages
    the assignment and its mirror, each with its own label.
    """
    y_a = online.represent(view_a)
    y_b = online.represent(view_b)
    z_a, z_b = online.projector(y_a), online.projector(y_b)
    q_a, q_b = online.predictor(z_a), online.predictor(z_b)
    bolt = (similarity_loss(q_a, targets.z_b, normalize) + similarity_loss(q_b, targets.z_a, normalize)).mean()

    p_ab = torch.sigmoid(difficulty_logits(y_a, targets.y_b, online.difficulty_head))
    p_ba = torch.sigmoid(difficulty_logits(y_b, targets.y_a, online.difficulty_head))
    diff = 0.5 * (binary_cross_entropy(p_ab, label_ab) + binary_cross_entropy(p_ba, label_ba)).mean()
    return LossTerms(bolt, diff, total_loss(bolt, diff, alpha), p_ab, p_ba, z_a)


def bolt_loss(online: OnlineBranch, target: Branch, view_a, view_b, normalize: bool = True) -> torch.Tensor:
    """Symmetrised similarity loss; gradients reach only the online branch."""
    t = target_outputs(target, view_a, view_b)
    z_a = online.projector(online.represent(view_a))
    z_b = online.projector(online.represent(view_b))
    return (
        similarity_loss(online.predictor(z_a), t.z_b, normalize)
        + similarity_loss(online.predictor(z_b), t.z_a, normalize)
    ).mean()


@dataclass
class TrainReport:
    step: int
    loss_bolt: float
    loss_diff: float
    loss_total: float
    diff_acc: float
    repr_std: float
    tau: float

    CSV_HEADER = "step,loss_total,loss_bolt,loss_diff,diff_acc,repr_std"

    def csv_row(self) -> str:
        return ",".join(
            [str(self.step)] + [repr(v) for v in (self.loss_total, self.loss_bolt, self.loss_diff, self.diff_acc, self.repr_std)]
        )


def representation_std(z: torch.Tensor) -> float:
    """Mean over dimensions of the across-batch std of the online projections."""
    z = z.detach()
    if z.shape[0] < 2:
        return 0.0
    return float(z.std(dim=0, unbiased=False).mean())


class BoltTrainer:
    """Owns both branches, the optimiser and the perturbation RNG; the single writer of parameters."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg or TrainConfig()
        self.seed = seed
        self.online = build_online(model_cfg, seed, dtype)
        self.target = make_target(self.online)
        self.optimizer = torch.optim.AdamW(
            self.online.parameters(), lr=self.train_cfg.lr, weight_decay=self.train_cfg.weight_decay
        )
        self.rng = np.random.default_rng(self.train_cfg.perturb_seed)
        self.step = 0

    def train_step(self, images) -> TrainReport:
        cfg = self.train_cfg
        images = torch.as_tensor(np.asarray(images), dtype=next(self.online.parameters()).dtype)
        if images.ndim == 3:
            images = images[None]
        patches = image_patches(images, self.model_cfg)
        n = self.model_cfg.embed.N
        perm_a = sample_permutations(len(images), n, self.rng)
        perm_b = sample_permutations(len(images), n, self.rng)

        self.online.train()
        views = make_views(self.online, patches, perm_a, perm_b)
        label_ab, label_ba = view_labels(views)
        targets = target_outputs(self.target, views.a, views.b)
        terms = online_losses(self.online, views.a, views.b, targets, label_ab, label_ba, cfg.alpha, cfg.normalize)

        correct = torch.cat([(terms.p_ab >= 0.5).long() == label_ab, (terms.p_ba >= 0.5).long() == label_ba])
        tau = tau_at(cfg, self.step)
        report = TrainReport(
            step=self.step + 1,
            loss_bolt=float(terms.bolt.detach()),
            loss_diff=float(terms.diff.detach()),
            loss_total=float(terms.total.detach()),
            diff_acc=float(correct.double().mean()),
            repr_std=representation_std(terms.z_online),
            tau=tau,
        )
        if not math.isfinite(report.loss_total):
            raise NumericalError(f"non-finite loss at step {report.step}: {report}", report)

        self.optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        for group in self.optimizer.param_groups:
            group["lr"] = lr_at(cfg, self.step)
        self.optimizer.step()
        ema_update(self.online, self.target, tau)
        self.step += 1
        return report

    # -- state for checkpointing -------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"online/{k}": v for k, v in self.online.state_dict().items()}
        out.update({f"target/{k}": v for k, v in self.target.state_dict().items()})
        names = {id(p): k for k, p in self.online.named_parameters()}
        for p, st in self.optimizer.state.items():
            for key, val in st.items():
                out[f"optim/{names[id(p)]}/{key}"] = torch.as_tensor(val)
        return out

    def meta(self) -> dict:
        return {
            "kind": "bolt-pretrain",
            "step": self.step,
            "seed": self.seed,
            "model": self.model_cfg.to_dict(),
            "train": asdict(self.train_cfg),
            "rng_state": self.rng.bit_generator.state,
        }

    def load_state(self, tensors: dict[str, torch.Tensor], meta: dict) -> None:
        from .checkpoint import load_module_tensors

        load_module_tensors(self.online, tensors, "online/")
        load_module_tensors(self.target, tensors, "target/")
        params = dict(self.online.named_parameters())
        self.optimizer.state.clear()
        for key, val in tensors.items():
            if not key.startswith("optim/"):
                continue
            pname, slot = key[len("optim/"):].rsplit("/", 1)
            if pname not in params:
                from .checkpoint import StructureMismatchError

                raise StructureMismatchError(f"optimizer state for unknown tensor {pname!r}")
            self.optimizer.state[params[pname]][slot] = val.clone()
        self.step = int(meta.get("step", 0))
        if "rng_state" in meta:
            self.rng.bit_generator.state = meta["rng_state"]
