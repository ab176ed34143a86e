"""Patch recombination feeding the encoder, and the two per-cell predictors.

Both functional heads are single affine maps shared across pyramid levels:
one emits class logits, the other emits flattened dynamic convolution
kernels, supervised only through the mask loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class GridSpec:
    grid_sizes: tuple[int, ...]  # cells per side for P2..P6
    classes: int
    mask_channels: int
    kernel_size: int = 1  # spatial extent of each dynamic kernel

    def __post_init__(self):
        if len(self.grid_sizes) != 5:
            raise ConfigError("grid_sizes must cover P2..P6")
        if any(n < 1 for n in self.grid_sizes):
            raise ConfigError("grid sizes must be >= 1")
        if any(a < b for a, b in zip(self.grid_sizes, self.grid_sizes[1:])):
            raise ConfigError("grid sizes must be non-increasing from P2 to P6")
        if self.classes < 1 or self.mask_channels < 1 or self.kernel_size < 1:
            raise ConfigError("classes, mask_channels and kernel_size must be positive")

    @property
    def kernel_dim(self) -> int:
        return self.kernel_size * self.kernel_size * self.mask_channels


class GridPrediction:
    """Per-level class logit and kernel grids emitted by the heads."""

    def __init__(self, class_logits: dict[str, Tensor], kernels: dict[str, Tensor]):
        self.class_logits = class_logits
        self.kernels = kernels


def patchify(level_feature: Tensor, n: int, projection: nn.Linear) -> Tensor:
    """Resize a [Cf, h, w] level map to an n x n grid and project channels."""
    if n < 1:
        raise ConfigError("grid size must be >= 1")
    grid = ad.bilinear_resize(level_feature.reshape(1, *level_feature.shape), n, n)
    grid = grid.reshape(level_feature.shape[0], n, n).transpose(1, 2, 0)  # [n, n, Cf]
    return projection(grid)


class ClassHead(nn.Module):
    """Single linear layer to per-cell class logits; bias set to a low-probability prior."""

    def __init__(self, embed_dim: int, classes: int, rng: np.random.Generator,
                 prior: float = 0.01, dtype=None):
        bias = float(-np.log((1.0 - prior) / prior))
        self.proj = nn.Linear(embed_dim, classes, rng, dtype=dtype, bias_value=bias, weight_std=0.01)

    def __call__(self, encoded: Tensor) -> Tensor:
        return self.proj(encoded)


class KernelHead(nn.Module):
    """Single linear layer to per-cell flattened convolution kernels."""

    def __init__(self, embed_dim: int, kernel_dim: int, rng: np.random.Generator, dtype=None):
        self.proj = nn.Linear(embed_dim, kernel_dim, rng, dtype=dtype, weight_std=0.01)

    def __call__(self, encoded: Tensor) -> Tensor:
        return self.proj(encoded)
