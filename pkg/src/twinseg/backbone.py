"""Small convolutional backbone with lateral/top-down pyramid fusion.

Produces levels P2..P6 at strides 4/8/16/32/64 with a common channel count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

LEVELS = ("P2", "P3", "P4", "P5", "P6")
STRIDES = {"P2": 4, "P3": 8, "P4": 16, "P5": 32, "P6": 64}


@dataclass
class FeaturePyramid:
    levels: dict[str, Tensor]
    channels: int
    strides: dict[str, int] = field(default_factory=lambda: dict(STRIDES))

    def __post_init__(self):
        for name, t in self.levels.items():
            if t.shape[0] != self.channels:
                raise DimensionError(f"{name} has {t.shape[0]} channels, expected {self.channels}")


class Backbone(nn.Module):
    """Stem plus four stages of two conv blocks each; every stage halves resolution."""

    def __init__(self, rng: np.random.Generator, channels=(16, 32, 64, 128), dtype=None):
        if len(channels) != 4:
            raise ConfigError("backbone needs exactly four stage channel counts")
        self.stem = nn.ConvNormAct(3, channels[0], rng, stride=2, dtype=dtype)
        stages = []
        prev = channels[0]
        for ch in channels:
            stages.append([
                nn.ConvNormAct(prev, ch, rng, stride=2, dtype=dtype),
                nn.ConvNormAct(ch, ch, rng, stride=1, dtype=dtype),
            ])
            prev = ch
        self.stages = stages
        self.channels = tuple(channels)

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"backbone expects [N, 3, H, W], got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        if h % 64 or w % 64:
            raise ConfigError(f"input extent {h}x{w} must be a multiple of 64")
        x = self.stem(image)
        outs = []
        for block_a, block_b in self.stages:
            x = block_b(block_a(x))
            outs.append(x)
        return tuple(outs)  # C2..C5 at strides 4/8/16/32


class Fpn(nn.Module):
    """1x1 lateral projections, top-down 2x bilinear fusion, 3x3 smoothing."""

    def __init__(self, stage_channels, out_channels: int, rng: np.random.Generator, dtype=None):
        self.laterals = [nn.Conv2d(ch, out_channels, 1, rng, dtype=dtype) for ch in stage_channels]
        self.smooths = [nn.Conv2d(out_channels, out_channels, 3, rng, padding=1, dtype=dtype) for _ in stage_channels]
        self.out_channels = out_channels

    def __call__(self, c2: Tensor, c3: Tensor, c4: Tensor, c5: Tensor) -> FeaturePyramid:
        stages = (c2, c3, c4, c5)
        if any(s.ndim != 4 or s.shape[0] != 1 for s in stages):
            raise DimensionError("pyramid fusion expects batch-1 stage tensors [1, C, h, w]")
        laterals = [lat(c) for lat, c in zip(self.laterals, stages)]
        tops = [None] * 4
        tops[3] = laterals[3]
        for i in (2, 1, 0):
            up = ad.bilinear_resize(tops[i + 1], laterals[i].shape[2], laterals[i].shape[3])
            tops[i] = laterals[i] + up
        smoothed = [sm(t) for sm, t in zip(self.smooths, tops)]
        p6 = ad.max_pool2d(smoothed[3], 2, 2)
        levels = {
            "P2": smoothed[0].reshape(*smoothed[0].shape[1:]),
            "P3": smoothed[1].reshape(*smoothed[1].shape[1:]),
            "P4": smoothed[2].reshape(*smoothed[2].shape[1:]),
            "P5": smoothed[3].reshape(*smoothed[3].shape[1:]),
            "P6": p6.reshape(*p6.shape[1:]),
        }
        return FeaturePyramid(levels=levels, channels=self.out_channels)
