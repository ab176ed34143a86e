"""Dense multi-head self-attention and its column/row factorized counterpart.

The factorized ("twin") form runs attention within each column of an H x W
grid, then within each row, each pass with its own projections and additive
positional embeddings. The dense masked variant doubles as the equivalence
oracle: a same-column (or same-row) mask over the flattened grid must
reproduce the factorized passes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, UsageError

MASK_FILL = -1e30


@dataclass
class AttentionConfig:
    embed_dim: int
    heads: int
    grid_n: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.grid_n < 1:
            raise ConfigError("grid_n must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


class AttentionParams(nn.Module):
    """Query/key/value/output projections for one attention mechanism."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or ad.default_dtype()
        self.wq = nn.xavier_uniform(rng, (dim, dim), dim, dim, dtype)
        self.wk = nn.xavier_uniform(rng, (dim, dim), dim, dim, dtype)
        self.wv = nn.xavier_uniform(rng, (dim, dim), dim, dim, dtype)
        self.wo = nn.xavier_uniform(rng, (dim, dim), dim, dim, dtype)
        self.bq = nn.zeros_param((dim,), dtype)
        self.bk = nn.zeros_param((dim,), dtype)
        self.bv = nn.zeros_param((dim,), dtype)
        self.bo = nn.zeros_param((dim,), dtype)


class PositionalEmbeddings(nn.Module):
    """Additive embeddings: one per column position and one per row position."""

    def __init__(self, height: int, width: int, dim: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or ad.default_dtype()
        bound = 1.0 / float(np.sqrt(dim))
        self.column_pe = ad.parameter(rng.uniform(-bound, bound, size=(1, width, dim)).astype(dtype))
        self.row_pe = ad.parameter(rng.uniform(-bound, bound, size=(height, 1, dim)).astype(dtype))

    @classmethod
    def zeros(cls, height: int, width: int, dim: int, dtype=None):
        pe = cls.__new__(cls)
        dtype = dtype or ad.default_dtype()
        pe.column_pe = ad.parameter(np.zeros((1, width, dim), dtype=dtype))
        pe.row_pe = ad.parameter(np.zeros((height, 1, dim), dtype=dtype))
        return pe


class _ScoreTracker:
    """Counts attention-score elements materialized while installed."""

    def __init__(self):
        self.elements = 0

    def add(self, n: int):
        self.elements += n


_TRACKER: _ScoreTracker | None = None


class track_score_allocation:
    """Context manager exposing the number of score-matrix elements allocated."""

    def __enter__(self) -> _ScoreTracker:
        global _TRACKER
        self._prev = _TRACKER
        _TRACKER = _ScoreTracker()
        return _TRACKER

    def __exit__(self, *exc):
        global _TRACKER
        _TRACKER = self._prev
        return False


def _batched_mha(x: Tensor, params: AttentionParams, heads: int, mask: np.ndarray | None = None,
                 dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Scaled dot-product attention over [B, S, C] with per-head 1/sqrt(C/heads) scaling."""
    b, s, c = x.shape
    dh = c // heads
    q = ad.linear(x, params.wq, params.bq).reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    k = ad.linear(x, params.wk, params.bk).reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    v = ad.linear(x, params.wv, params.bv).reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / float(np.sqrt(dh)))
    if _TRACKER is not None:
        _TRACKER.add(scores.size)
    if mask is not None:
        scores = ad.masked_fill(scores, ~mask, MASK_FILL)
    attn = ad.softmax(scores, axis=-1)
    if dropout > 0.0:
        if rng is None:
            raise UsageError("dropout > 0 requires an rng")
        attn = ad.dropout(attn, dropout, rng)
    ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, s, c)
    return ad.linear(ctx, params.wo, params.bo)


def dense_mhsa(x: Tensor, params: AttentionParams, heads: int, dropout: float = 0.0,
               rng: np.random.Generator | None = None) -> Tensor:
    """Dense self-attention over an arbitrary-length [S, C] sequence."""
    if x.ndim != 2:
        raise DimensionError(f"dense_mhsa expects [S, C], got {x.shape}")
    out = _batched_mha(x.reshape(1, *x.shape), params, heads, dropout=dropout, rng=rng)
    return out.reshape(x.shape)


def full_mhsa(x: Tensor, params: AttentionParams, cfg: AttentionConfig,
              rng: np.random.Generator | None = None) -> Tensor:
    """Dense self-attention over a [S, C] sequence, S = grid_n**2."""
    if x.ndim != 2 or x.shape[1] != cfg.embed_dim:
        raise DimensionError(f"full_mhsa expects [S, {cfg.embed_dim}], got {x.shape}")
    if x.shape[0] != cfg.grid_n * cfg.grid_n:
        raise DimensionError(f"sequence length {x.shape[0]} != grid_n^2 = {cfg.grid_n ** 2}")
    return dense_mhsa(x, params, cfg.heads, dropout=cfg.dropout, rng=rng)


def masked_mhsa(x: Tensor, mask: np.ndarray, params: AttentionParams, cfg: AttentionConfig,
                rng: np.random.Generator | None = None) -> Tensor:
    """Dense attention with weights zeroed outside ``mask`` and renormalized per row."""
    if x.ndim != 2:
        raise DimensionError(f"masked_mhsa expects [S, C], got {x.shape}")
    s = x.shape[0]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (s, s):
        raise DimensionError(f"mask shape {mask.shape} != ({s}, {s})")
    if not mask.any(axis=1).all():
        raise UsageError("masked_mhsa: some row of the mask allows no entries")
    out = _batched_mha(x.reshape(1, *x.shape), params, cfg.heads, mask=mask, dropout=cfg.dropout, rng=rng)
    return out.reshape(x.shape)


def _check_grid(p: Tensor, cfg: AttentionConfig):
    if p.ndim != 3 or p.shape[2] != cfg.embed_dim:
        raise DimensionError(f"expected [H, W, {cfg.embed_dim}] grid, got {p.shape}")


def column_attention(p: Tensor, pe: PositionalEmbeddings, params: AttentionParams, cfg: AttentionConfig,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Attention within each column; different columns stay independent.

    The column embedding (1 x W x C) is added, broadcast along rows, before
    the projections.
    """
    _check_grid(p, cfg)
    h, w, c = p.shape
    x = p + pe.column_pe
    seqs = x.transpose(1, 0, 2)  # [W, H, C]: one sequence per column
    out = _batched_mha(seqs, params, cfg.heads, dropout=cfg.dropout, rng=rng)
    return out.transpose(1, 0, 2)


def row_attention(p: Tensor, pe: PositionalEmbeddings, params: AttentionParams, cfg: AttentionConfig,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Attention within each row; mirror of column_attention with the row embedding."""
    _check_grid(p, cfg)
    x = p + pe.row_pe
    out = _batched_mha(x, params, cfg.heads, dropout=cfg.dropout, rng=rng)  # [H, W, C]: one sequence per row
    return out


class TwinAttention(nn.Module):
    """Column attention followed by row attention, each with its own projections."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=None):
        self.cfg = cfg
        self.column = AttentionParams(cfg.embed_dim, rng, dtype)
        self.row = AttentionParams(cfg.embed_dim, rng, dtype)

    def __call__(self, p: Tensor, pe: PositionalEmbeddings, rng: np.random.Generator | None = None) -> Tensor:
        mid = column_attention(p, pe, self.column, self.cfg, rng=rng)
        return row_attention(mid, pe, self.row, self.cfg, rng=rng)


def twin_attention(p: Tensor, pe: PositionalEmbeddings, column_params: AttentionParams,
                   row_params: AttentionParams, cfg: AttentionConfig,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Functional form of the sequential column-then-row attention."""
    mid = column_attention(p, pe, column_params, cfg, rng=rng)
    return row_attention(mid, pe, row_params, cfg, rng=rng)


def same_column_mask(h: int, w: int) -> np.ndarray:
    """Boolean [h*w, h*w] mask allowing attention only within one column (row-major flattening)."""
    cols = np.tile(np.arange(w), h)
    return cols[:, None] == cols[None, :]


def same_row_mask(h: int, w: int) -> np.ndarray:
    rows = np.repeat(np.arange(h), w)
    return rows[:, None] == rows[None, :]


def count_attention_cost(kind: str, h: int, w: int, c: int, heads: int = 1) -> dict[str, int]:
    """Closed-form cost of one attention application over an h x w grid.

    ``score_memory`` counts score-matrix elements (per head, times heads);
    ``flops`` counts the multiplications forming the score matrices and the
    weighted value sums (independent of the head split, which divides the
    channel width it multiplies back in count).
    """
    if h < 1 or w < 1 or c < 1 or heads < 1:
        raise ConfigError("count_attention_cost needs positive extents")
    if kind == "full":
        per_head = (h * w) ** 2
    elif kind == "twin":
        per_head = h * w * w + w * h * h
    else:
        raise ConfigError(f"unknown attention kind {kind!r}")
    return {"score_memory": heads * per_head, "flops": 2 * c * per_head}
