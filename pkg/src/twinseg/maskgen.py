"""Unified mask feature fusion and dynamic-convolution mask decoding.

P2-P4 come from the pyramid; P5 (optionally P4 too) can be replaced by a
projection of the encoder output. Each positive grid cell's predicted kernel
is convolved over the fused feature to produce one mask logit map per cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .heads import GridSpec

SUBSTITUTIONS = ("none", "p5", "p4p5")

# conv/norm/act stages per level before upsampling to the stride-4 extent
_STAGE_COUNTS = {"P2": 1, "P3": 1, "P4": 2, "P5": 3}


@dataclass
class InstanceSet:
    """Decoded soft masks with score, category and origin cell."""

    masks: np.ndarray  # [R, H, W] in [0, 1]
    scores: np.ndarray  # [R]
    categories: np.ndarray  # [R], values in 1..M
    provenance: list[tuple[str, int, int]] = field(default_factory=list)  # (level, cell_i, cell_j)

    def __post_init__(self):
        r = len(self.scores)
        if len(self.masks) != r or len(self.categories) != r or len(self.provenance) != r:
            raise DimensionError("masks, scores, categories and provenance must agree in count")

    def __len__(self):
        return len(self.scores)

    @classmethod
    def empty(cls, h: int, w: int) -> "InstanceSet":
        return cls(masks=np.zeros((0, h, w), dtype=np.float32), scores=np.zeros(0, dtype=np.float32),
                   categories=np.zeros(0, dtype=np.int64), provenance=[])

    def select(self, order) -> "InstanceSet":
        order = np.asarray(order, dtype=np.int64)
        return InstanceSet(masks=self.masks[order], scores=self.scores[order],
                           categories=self.categories[order],
                           provenance=[self.provenance[i] for i in order])


class MaskFusion(nn.Module):
    """Per-level conv/GN/ReLU stacks, bilinear upsampling to stride 4, sum, pointwise conv."""

    def __init__(self, in_channels: int, mask_channels: int, rng: np.random.Generator,
                 dtype=None, norm: bool = True):
        self.stages = {}
        for name, count in _STAGE_COUNTS.items():
            blocks = []
            prev = in_channels
            for _ in range(count):
                blocks.append(nn.ConvNormAct(prev, mask_channels, rng, dtype=dtype, norm=norm))
                prev = mask_channels
            self.stages[name] = blocks
        self.pointwise = nn.Conv2d(mask_channels, mask_channels, 1, rng, dtype=dtype)
        self.mask_channels = mask_channels

    def __call__(self, p2: Tensor, p3: Tensor, p4: Tensor, p5: Tensor) -> Tensor:
        levels = {"P2": p2, "P3": p3, "P4": p4, "P5": p5}
        target_h, target_w = p2.shape[1], p2.shape[2]
        for name, factor in (("P3", 2), ("P4", 4), ("P5", 8)):
            t = levels[name]
            if (t.shape[1] * factor, t.shape[2] * factor) != (target_h, target_w):
                raise DimensionError(
                    f"{name} extent {t.shape[1:]} inconsistent with stride-4 target {(target_h, target_w)}"
                )
        total = None
        for name in ("P2", "P3", "P4", "P5"):
            x = levels[name].reshape(1, *levels[name].shape)
            for block in self.stages[name]:
                x = block(x)
            if name != "P2":
                x = ad.bilinear_resize(x, target_h, target_w)
            total = x if total is None else total + x
        fused = self.pointwise(total)
        return fused.reshape(*fused.shape[1:])  # [C_mask, H/4, W/4]


class EncoderFeatureProjection(nn.Module):
    """Project an encoded [N, N, C] grid back to pyramid channels at a level's extent."""

    def __init__(self, embed_dim: int, out_channels: int, rng: np.random.Generator, dtype=None):
        self.proj = nn.Linear(embed_dim, out_channels, rng, dtype=dtype)

    def __call__(self, encoded_grid: Tensor, out_h: int, out_w: int) -> Tensor:
        g = self.proj(encoded_grid)  # [N, N, Cf]
        g = g.transpose(2, 0, 1).reshape(1, g.shape[2], g.shape[0], g.shape[1])
        return ad.bilinear_resize(g, out_h, out_w).reshape(g.shape[1], out_h, out_w)


def substituted_level(level_feature: Tensor, encoded_grid: Tensor | None,
                      projection: EncoderFeatureProjection | None, enabled: bool) -> Tensor:
    """Return the encoder-derived replacement for a pyramid level, or the level unchanged."""
    if not enabled:
        return level_feature
    if encoded_grid is None or projection is None:
        raise ConfigError("substitution enabled but no encoded grid/projection provided")
    return projection(encoded_grid, level_feature.shape[1], level_feature.shape[2])


def dynamic_convolve(mask_feature: Tensor, kernels: Tensor, kernel_size: int) -> Tensor:
    """Convolve per-cell kernels over the fused feature: one logit map per cell.

    ``kernels`` is [N, N, D] (or already flattened [R, D]) with
    D = kernel_size**2 * C_mask, laid out as (C_mask, kh, kw) per cell.
    Returns [R, H/4, W/4] mask logits.
    """
    c = mask_feature.shape[0]
    d = kernels.shape[-1]
    if d != kernel_size * kernel_size * c:
        raise ConfigError(
            f"kernel dim {d} != kernel_size^2 * mask channels = {kernel_size * kernel_size * c}"
        )
    flat = kernels.reshape(-1, d)
    weights = flat.reshape(flat.shape[0], c, kernel_size, kernel_size)
    out = ad.conv2d(mask_feature.reshape(1, *mask_feature.shape), weights,
                    stride=1, padding=kernel_size // 2)
    return out.reshape(out.shape[1], out.shape[2], out.shape[3])


def decode_instances(class_logit_grids: dict[str, Tensor], kernel_grids: dict[str, Tensor],
                     mask_feature: Tensor, spec: GridSpec, score_threshold: float,
                     image_h: int, image_w: int) -> InstanceSet:
    """Turn per-cell predictions into soft instance masks (pre-suppression)."""
    masks, scores, categories, provenance = [], [], [], []
    with ad.no_grad():
        for level, logits in class_logit_grids.items():
            probs = 1.0 / (1.0 + np.exp(-logits.data))
            best = probs.max(axis=-1)
            best_class = probs.argmax(axis=-1)
            keep_i, keep_j = np.nonzero(best > score_threshold)
            if keep_i.size == 0:
                continue
            n = logits.shape[0]
            flat_idx = keep_i * n + keep_j
            kernels = kernel_grids[level].reshape(n * n, spec.kernel_dim)
            selected = ad.take(kernels, flat_idx, axis=0)
            logit_maps = dynamic_convolve(mask_feature, selected, spec.kernel_size)
            soft = ad.sigmoid(logit_maps)
            full = ad.bilinear_resize(soft.reshape(soft.shape[0], 1, *soft.shape[1:]), image_h, image_w)
            masks.append(full.data[:, 0])
            scores.append(best[keep_i, keep_j])
            categories.append(best_class[keep_i, keep_j] + 1)
            provenance.extend((level, int(i), int(j)) for i, j in zip(keep_i, keep_j))
    if not masks:
        return InstanceSet.empty(image_h, image_w)
    return InstanceSet(masks=np.concatenate(masks), scores=np.concatenate(scores).astype(np.float32),
                       categories=np.concatenate(categories).astype(np.int64), provenance=provenance)


# -- instance manifest serialization ------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run-length encoding; counts start with the leading zero run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return {"size": list(mask.shape), "counts": []}
    changes = np.nonzero(np.diff(flat))[0] + 1
    boundaries = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(boundaries).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    out = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for count in rle["counts"]:
        if value:
            out[pos : pos + count] = True
        pos += count
        value = not value
    return out.reshape(h, w)


def instances_to_manifest(image_id, instances: InstanceSet, binarize_at: float = 0.5) -> dict:
    return {
        "image_id": image_id,
        "instances": [
            {
                "category": int(instances.categories[i]),
                "score": float(instances.scores[i]),
                "level": instances.provenance[i][0],
                "cell": [instances.provenance[i][1], instances.provenance[i][2]],
                "rle": rle_encode(instances.masks[i] >= binarize_at),
            }
            for i in range(len(instances))
        ],
    }
