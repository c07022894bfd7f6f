"""Patch cropping, linear token embedding and slot-wise position/class attachment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchEmbedConfig:
    H: int = 32
    W: int = 32
    C: int = 3
    P: int = 8
    D: int = 64

    def __post_init__(self):
        if min(self.H, self.W, self.C, self.P, self.D) < 1:
            raise ConfigError("H, W, C, P and D must be positive")
        if self.H % self.P:
            raise ConfigError(f"P must divide H (P={self.P}, H={self.H})")
        if self.W % self.P:
            raise ConfigError(f"P must divide W (P={self.P}, W={self.W})")

    @property
    def N(self) -> int:
        return (self.H * self.W) // (self.P * self.P)

    @property
    def S(self) -> int:
        """Patches per grid row; also the perturbation window stride."""
        return self.W // self.P

    @property
    def patch_dim(self) -> int:
        return self.P * self.P * self.C


def patchify(images, cfg: PatchEmbedConfig):
    """Crop ``(..., H, W, C)`` images into ``(..., N, P*P*C)`` raster-ordered flat patches.

    Row ``k`` holds the patch at grid position ``(k // S, k % S)``, itself
    flattened row-major over ``(P, P, C)``. Works on numpy arrays and tensors.
    """
    h, w, c = images.shape[-3:]
    if (h, w, c) != (cfg.H, cfg.W, cfg.C):
        raise ConfigError(f"image shape {(h, w, c)} does not match config {(cfg.H, cfg.W, cfg.C)}")
    p = cfg.P
    lead = images.shape[:-3]
    x = images.reshape(*lead, h // p, p, w // p, p, c)
    nd = len(lead)
    order = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4)
    x = x.transpose(order) if isinstance(x, np.ndarray) else x.permute(order)
    return x.reshape(*lead, cfg.N, cfg.patch_dim)


def embed(patches: torch.Tensor, E: torch.Tensor) -> torch.Tensor:
    """``z_o = patches @ E``, one token per patch row."""
    if patches.shape[-1] != E.shape[0]:
        raise ConfigError(f"patch width {patches.shape[-1]} does not match E rows {E.shape[0]}")
    return patches @ E


def attach_position_and_class(tokens: torch.Tensor, pos_emb: torch.Tensor, cls_token: torch.Tensor) -> torch.Tensor:
    """Prepend the class token and add slot position embeddings: ``(..., N, D) -> (..., N+1, D)``."""
    if tokens.shape[-2] + 1 != pos_emb.shape[0]:
        raise ConfigError(f"expected {pos_emb.shape[0] - 1} tokens, got {tokens.shape[-2]}")
    cls = cls_token.expand(*tokens.shape[:-2], 1, tokens.shape[-1])
    return torch.cat([cls, tokens], dim=-2) + pos_emb


class PatchEmbed(nn.Module):
    """Trainable E, position embeddings and class token."""

    def __init__(self, cfg: PatchEmbedConfig):
        super().__init__()
        self.cfg = cfg
        self.E = nn.Parameter(torch.empty(cfg.patch_dim, cfg.D))
        self.pos_emb = nn.Parameter(torch.empty(cfg.N + 1, cfg.D))
        self.cls_token = nn.Parameter(torch.zeros(cfg.D))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            nn.init.trunc_normal_(self.E, std=0.02, a=-0.04, b=0.04, generator=generator)
            nn.init.trunc_normal_(self.pos_emb, std=0.02, a=-0.04, b=0.04, generator=generator)
            self.cls_token.zero_()

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return embed(patches, self.E)

    def attach(self, tokens: torch.Tensor) -> torch.Tensor:
        return attach_position_and_class(tokens, self.pos_emb, self.cls_token)
