"""Token perturbation: permutation, windowed linear fusion and split.

Shapes: ``z_o`` is ``(..., N, D)``; windows are ``(..., K, M*D)``; long tokens
``(..., K, S*D)``; the split output is back at ``(..., N, D)`` with ``N = K*S``.
Permutations are integer index arrays with ``out[i] = in[perm[i]]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .patch_embed import ConfigError


@dataclass(frozen=True)
class PerturbConfig:
    N: int
    S: int
    M: int

    def __post_init__(self):
        if self.N < 1 or self.S < 1 or self.M < 1:
            raise ConfigError("N, S and M must be positive")
        if self.N % self.S:
            raise ConfigError(f"S must divide N (S={self.S}, N={self.N})")

    @property
    def K(self) -> int:
        return self.N // self.S


@dataclass
class PerturbedView:
    tokens: torch.Tensor
    perm: np.ndarray
    difficulty_score: float


def sample_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.permutation(n)


def sample_permutations(batch: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([rng.permutation(n) for _ in range(batch)])


def is_permutation(perm) -> bool:
    p = np.asarray(perm)
    return p.ndim == 1 and np.array_equal(np.sort(p), np.arange(len(p)))


def _gather_rows(z: torch.Tensor, index) -> torch.Tensor:
    index = torch.as_tensor(np.asarray(index), dtype=torch.long, device=z.device)
    if index.ndim == 1:
        return z[..., index, :]
    # one index row per leading batch element
    idx = index.reshape(*index.shape, 1).expand(*index.shape, z.shape[-1])
    return torch.gather(z, -2, idx)


def permute(z_o: torch.Tensor, perm) -> torch.Tensor:
    perm = np.asarray(perm)
    if perm.shape[-1] != z_o.shape[-2]:
        raise ValueError(f"permutation length {perm.shape[-1]} does not match {z_o.shape[-2]} tokens")
    return _gather_rows(z_o, perm)


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    np.put_along_axis(inv, perm, np.broadcast_to(np.arange(perm.shape[-1]), perm.shape), axis=-1)
    return inv


def inverse_permute(tokens: torch.Tensor, perm) -> torch.Tensor:
    """Undo ``permute``: output row ``perm[i]`` is input row ``i``.

    After fusion, split slot ``i`` is treated as the heir of permuted slot ``i``.
    """
    perm = np.asarray(perm)
    if perm.shape[-1] != tokens.shape[-2]:
        raise ValueError(f"permutation length {perm.shape[-1]} does not match {tokens.shape[-2]} tokens")
    return _gather_rows(tokens, inverse_permutation(perm))


def window_index(cfg: PerturbConfig) -> np.ndarray:
    """``(K, M)`` row indices; window ``k`` covers ``kS .. kS+M-1`` modulo N."""
    starts = np.arange(cfg.K)[:, None] * cfg.S
    return (starts + np.arange(cfg.M)[None, :]) % cfg.N


def window_concat(z_p: torch.Tensor, cfg: PerturbConfig) -> torch.Tensor:
    if z_p.shape[-2] != cfg.N:
        raise ConfigError(f"expected {cfg.N} tokens, got {z_p.shape[-2]}")
    idx = torch.as_tensor(window_index(cfg).reshape(-1), device=z_p.device)
    rows = z_p[..., idx, :]
    return rows.reshape(*z_p.shape[:-2], cfg.K, cfg.M * z_p.shape[-1])


def fuse(windows: torch.Tensor, E_fuse: torch.Tensor) -> torch.Tensor:
    if windows.shape[-1] != E_fuse.shape[0]:
        raise ConfigError(f"window width {windows.shape[-1]} does not match E_fuse rows {E_fuse.shape[0]}")
    return windows @ E_fuse


def split(z_l: torch.Tensor, D: int) -> torch.Tensor:
    if z_l.shape[-1] % D:
        raise ConfigError(f"long-token width {z_l.shape[-1]} is not a multiple of D={D}")
    s = z_l.shape[-1] // D
    return z_l.reshape(*z_l.shape[:-2], z_l.shape[-2] * s, D)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over the last two axes (all N*D entries of each matrix)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean(dim=(-2, -1))


def difficulty_score(view_tokens: torch.Tensor, perm, z_o: torch.Tensor) -> torch.Tensor:
    return mse(inverse_permute(view_tokens, perm), z_o)


def difficulty_label(score_online, score_target):
    """0 when the online view is strictly less perturbed, else 1 (ties go to 1).

    Accepts scalars or tensors of per-image scores.
    """
    if isinstance(score_online, torch.Tensor):
        return (score_online >= score_target).to(torch.long)
    return 0 if score_online < score_target else 1


class TokenPerturbation(nn.Module):
    """Holds the trainable fusion matrix ``E_fuse`` of shape ``(M*D, S*D)``."""

    def __init__(self, cfg: PerturbConfig, D: int, identity: bool = False):
        super().__init__()
        self.cfg = cfg
        self.D = D
        self.identity = identity
        self.E_fuse = nn.Parameter(torch.empty(cfg.M * D, cfg.S * D))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            if self.identity:
                if self.cfg.M != self.cfg.S:
                    raise ConfigError("identity perturbation requires M == S")
                self.E_fuse.copy_(torch.eye(self.E_fuse.shape[0]))
            else:
                nn.init.trunc_normal_(self.E_fuse, std=0.02, a=-0.04, b=0.04, generator=generator)

    def forward(self, z_o: torch.Tensor, perm) -> torch.Tensor:
        z_p = permute(z_o, perm)
        z_l = fuse(window_concat(z_p, self.cfg), self.E_fuse)
        return split(z_l, self.D)

    def view(self, z_o: torch.Tensor, rng: np.random.Generator) -> PerturbedView:
        """Perturb a single ``(N, D)`` token matrix with a freshly sampled permutation."""
        perm = sample_permutation(z_o.shape[-2], rng)
        tokens = self(z_o, perm)
        score = difficulty_score(tokens.detach(), perm, z_o.detach())
        return PerturbedView(tokens, perm, float(score))


def perturb_view(
    z_o: torch.Tensor, cfg: PerturbConfig, E_fuse: torch.Tensor, rng: np.random.Generator
) -> PerturbedView:
    perm = sample_permutation(cfg.N, rng)
    tokens = split(fuse(window_concat(permute(z_o, perm), cfg), E_fuse), z_o.shape[-1])
    score = difficulty_score(tokens.detach(), perm, z_o.detach())
    return PerturbedView(tokens, perm, float(score))


def perturbation_record(view: PerturbedView, cfg: PerturbConfig, D: int) -> str:
    """JSON record of the permutation and configuration behind a view."""
    return json.dumps(
        {
            "perm": [int(i) for i in view.perm],
            "N": cfg.N,
            "S": cfg.S,
            "M": cfg.M,
            "K": cfg.K,
            "D": D,
            "difficulty_score": view.difficulty_score,
        }
    )
