"""Small pre-norm vision transformer encoder returning the class-token row."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .patch_embed import ConfigError


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 2
    heads: int = 4
    D: int = 64
    mlp_ratio: float = 4.0
    N: int = 16

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.heads < 1 or self.D % self.heads:
            raise ConfigError(f"heads must divide D (heads={self.heads}, D={self.D})")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be > 0")

    @property
    def hidden(self) -> int:
        return int(round(self.D * self.mlp_ratio))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def weights(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        *lead, n, d = x.shape
        qkv = self.qkv(x).reshape(*lead, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.unbind(dim=-3)  # each (..., n, heads, dh)
        q, k, v = (t.transpose(-3, -2) for t in (q, k, v))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        return attn, v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn, v = self.weights(x)
        out = (attn @ v).transpose(-3, -2)
        return self.proj(out.reshape(*x.shape))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ViT(nn.Module):
    """Encoder over an ``(..., N+1, D)`` sequence whose row 0 is the class token."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(Block(cfg.D, cfg.heads, cfg.hidden) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.D)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        if seq.shape[-1] != self.cfg.D:
            raise ConfigError(f"sequence width {seq.shape[-1]} does not match D={self.cfg.D}")
        x = seq
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[..., 0, :]

    def attention_maps(self, seq: torch.Tensor) -> list[torch.Tensor]:
        """Per-block attention weights, each ``(..., heads, N+1, N+1)``."""
        maps = []
        x = seq
        for blk in self.blocks:
            maps.append(blk.attn.weights(blk.norm1(x))[0])
            x = blk(x)
        return maps


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm scale."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_vit(cfg: ViTConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ViT:
    model = ViT(cfg).to(dtype)
    init_weights(model, torch.Generator().manual_seed(seed))
    return model


def vit_forward(seq: torch.Tensor, model: ViT) -> torch.Tensor:
    return model(seq)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
