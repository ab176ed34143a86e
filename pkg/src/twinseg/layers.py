"""Encoder layer variants: dense attention, factorized attention, and the
conv-augmented factorized form, plus K-fold stacking.

All variants share the residual skeleton norm -> sublayer -> add (pre-norm by
default; post-norm available as an ablation flag).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .attention import (
    AttentionConfig,
    AttentionParams,
    PositionalEmbeddings,
    column_attention,
    full_mhsa,
    row_attention,
)
from .autodiff import Tensor
from .errors import ConfigError

VARIANTS = ("original", "pure_twin", "hybrid_twin")
LEAKY_SLOPE = 0.01


@dataclass
class LayerVariant:
    kind: str
    depth: int = 2
    mlp_ratio: float = 4.0
    post_norm: bool = False

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown layer variant {self.kind!r}; expected one of {VARIANTS}")
        if self.depth < 1:
            raise ConfigError("encoder depth must be >= 1")


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=None):
        self.fc1 = nn.Linear(dim, hidden, rng, dtype)
        self.fc2 = nn.Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class _ConvPair(nn.Module):
    """conv3x3 -> LeakyReLU -> conv3x3 over an [N, N, C] grid treated as a C-channel map."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=None):
        self.conv1 = nn.Conv2d(dim, dim, 3, rng, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(dim, dim, 3, rng, padding=1, dtype=dtype)

    def __call__(self, grid: Tensor) -> Tensor:
        h, w, c = grid.shape
        x = grid.transpose(2, 0, 1).reshape(1, c, h, w)
        x = self.conv2(ad.leaky_relu(self.conv1(x), LEAKY_SLOPE))
        return x.reshape(c, h, w).transpose(1, 2, 0)


class OriginalLayer(nn.Module):
    """Dense-attention encoder layer over a flattened [S, C] sequence."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, mlp_ratio: float = 4.0,
                 post_norm: bool = False, dtype=None):
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(cfg.embed_dim, dtype)
        self.attn = AttentionParams(cfg.embed_dim, rng, dtype)
        self.norm2 = nn.LayerNorm(cfg.embed_dim, dtype)
        self.mlp = Mlp(cfg.embed_dim, int(round(mlp_ratio * cfg.embed_dim)), rng, dtype)
        self.post_norm = post_norm

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if self.post_norm:
            x = self.norm1(x + full_mhsa(x, self.attn, self.cfg, rng=rng))
            return self.norm2(x + self.mlp(x))
        x = x + full_mhsa(self.norm1(x), self.attn, self.cfg, rng=rng)
        return x + self.mlp(self.norm2(x))


class PureTwinLayer(nn.Module):
    """Original skeleton with the attention slot filled by column-then-row attention."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, mlp_ratio: float = 4.0,
                 post_norm: bool = False, dtype=None):
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(cfg.embed_dim, dtype)
        self.column = AttentionParams(cfg.embed_dim, rng, dtype)
        self.row = AttentionParams(cfg.embed_dim, rng, dtype)
        self.norm2 = nn.LayerNorm(cfg.embed_dim, dtype)
        self.mlp = Mlp(cfg.embed_dim, int(round(mlp_ratio * cfg.embed_dim)), rng, dtype)
        self.post_norm = post_norm

    def _attend(self, p: Tensor, pe: PositionalEmbeddings, rng) -> Tensor:
        mid = column_attention(p, pe, self.column, self.cfg, rng=rng)
        return row_attention(mid, pe, self.row, self.cfg, rng=rng)

    def __call__(self, p: Tensor, pe: PositionalEmbeddings, rng: np.random.Generator | None = None) -> Tensor:
        if self.post_norm:
            p = self.norm1(p + self._attend(p, pe, rng))
            return self.norm2(p + self.mlp(p))
        p = p + self._attend(self.norm1(p), pe, rng)
        return p + self.mlp(self.norm2(p))


class HybridTwinLayer(PureTwinLayer):
    """Pure twin layer with a conv3x3 -> LeakyReLU -> conv3x3 pair appended to
    each attention sub-block inside the residual branch."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, mlp_ratio: float = 4.0,
                 post_norm: bool = False, dtype=None):
        super().__init__(cfg, rng, mlp_ratio, post_norm, dtype)
        self.column_convs = _ConvPair(cfg.embed_dim, rng, dtype)
        self.row_convs = _ConvPair(cfg.embed_dim, rng, dtype)

    def _attend(self, p: Tensor, pe: PositionalEmbeddings, rng) -> Tensor:
        mid = self.column_convs(column_attention(p, pe, self.column, self.cfg, rng=rng))
        return self.row_convs(row_attention(mid, pe, self.row, self.cfg, rng=rng))


class Encoder(nn.Module):
    """K serially connected layers of one variant, applied to an [N, N, C] grid.

    (No normalization after the stack: the mask-kernel pathway needs the
    residual stream's per-cell scale; a trailing norm collapses it.)"""

    def __init__(self, variant: LayerVariant, cfg: AttentionConfig, rng: np.random.Generator, dtype=None):
        self.variant = variant
        self.cfg = cfg
        maker = {
            "original": OriginalLayer,
            "pure_twin": PureTwinLayer,
            "hybrid_twin": HybridTwinLayer,
        }[variant.kind]
        self.layers = [maker(cfg, rng, variant.mlp_ratio, variant.post_norm, dtype) for _ in range(variant.depth)]

    def __call__(self, p: Tensor, pe: PositionalEmbeddings, rng: np.random.Generator | None = None) -> Tensor:
        h, w, c = p.shape
        if self.variant.kind == "original":
            x = (p + pe.column_pe + pe.row_pe).reshape(h * w, c)
            for layer in self.layers:
                x = layer(x, rng=rng)
            return x.reshape(h, w, c)
        for layer in self.layers:
            p = layer(p, pe, rng=rng)
        return p


def layer_flops(kind: str, n: int, c: int, mlp_ratio: float = 4.0) -> int:
    """Closed-form multiply count for one encoder layer on an n x n grid."""
    s = n * n
    proj = 4 * s * c * c  # q, k, v, output projections per mechanism
    mlp = 2 * s * c * int(round(mlp_ratio * c))
    if kind == "original":
        return proj + 2 * c * s * s + mlp
    twin_scores = 2 * c * (2 * n**3)
    base = 2 * proj + twin_scores + mlp
    if kind == "pure_twin":
        return base
    if kind == "hybrid_twin":
        return base + 4 * 9 * s * c * c
    raise ConfigError(f"unknown layer variant {kind!r}")
