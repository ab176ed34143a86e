"""Target assignment, focal and dice losses, and matrix-style mask suppression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, TrainingError
from .heads import GridSpec
from .maskgen import InstanceSet

DICE_EPS = 1.0


@dataclass
class AssignmentConfig:
    # (min, max) sqrt-area bounds per level; the first min and last max are
    # treated as 0 and infinity so every object lands somewhere
    scale_ranges: tuple[tuple[float, float], ...]
    center_fraction: float = 0.2

    def __post_init__(self):
        if len(self.scale_ranges) != 5:
            raise ConfigError("scale_ranges must cover P2..P6")
        for lo, hi in self.scale_ranges:
            if lo >= hi:
                raise ConfigError(f"empty scale range ({lo}, {hi})")
        if not 0.0 < self.center_fraction <= 1.0:
            raise ConfigError("center_fraction must lie in (0, 1]")


@dataclass
class NmsConfig:
    kernel: str = "gaussian"
    sigma: float = 2.0
    post_nms_score: float = 0.3
    max_instances: int = 100

    def __post_init__(self):
        if self.kernel not in ("linear", "gaussian"):
            raise ConfigError(f"unknown nms kernel {self.kernel!r}")
        if self.sigma <= 0:
            raise ConfigError("nms sigma must be positive")


@dataclass
class LevelTargets:
    class_targets: np.ndarray  # [N, N] int, 0 = background, else category id
    instance_index: np.ndarray  # [N, N] int, -1 = background


def _center_cell_range(low: float, high: float, extent: float, cells: int) -> tuple[int, int]:
    """Grid cells whose [k*cw, (k+1)*cw) span intersects the closed interval [low, high]."""
    cell = extent / cells
    lo = int(np.clip(np.floor(low / cell), 0, cells - 1))
    hi = int(np.clip(np.floor(high / cell), 0, cells - 1))
    return lo, hi


def assign_targets(instances: list[tuple[np.ndarray, int, tuple[float, float]]],
                   grid_spec: GridSpec, cfg: AssignmentConfig,
                   image_h: int, image_w: int) -> list[LevelTargets]:
    """Route instances (mask, category, centroid (cy, cx)) to grid cells per level.

    An instance lands on every level whose scale range contains sqrt(mask
    area); within a level, cells overlapping the center-fraction box around
    the centroid become positive. Cell conflicts go to the smaller instance.
    """
    targets = [
        LevelTargets(class_targets=np.zeros((n, n), dtype=np.int64),
                     instance_index=np.full((n, n), -1, dtype=np.int64))
        for n in grid_spec.grid_sizes
    ]
    order = sorted(range(len(instances)), key=lambda k: -float(np.sum(instances[k][0])))
    for k in order:  # descending area; smaller instances overwrite
        mask, category, centroid = instances[k]
        area = float(np.sum(mask))
        if area <= 0:
            raise DataError(f"instance {k} has a zero-area mask")
        if not 1 <= category <= grid_spec.classes:
            raise DataError(f"instance {k} category {category} outside 1..{grid_spec.classes}")
        scale = float(np.sqrt(area))
        ys, xs = np.nonzero(mask)
        box_h = float(ys.max() - ys.min() + 1)
        box_w = float(xs.max() - xs.min() + 1)
        cy, cx = centroid
        half_h = 0.5 * cfg.center_fraction * box_h
        half_w = 0.5 * cfg.center_fraction * box_w
        for lvl, (lo, hi) in enumerate(cfg.scale_ranges):
            lo_eff = 0.0 if lvl == 0 else lo
            hi_eff = np.inf if lvl == len(cfg.scale_ranges) - 1 else hi
            if not lo_eff <= scale <= hi_eff:
                continue
            n = grid_spec.grid_sizes[lvl]
            i0, i1 = _center_cell_range(cy - half_h, cy + half_h, image_h, n)
            j0, j1 = _center_cell_range(cx - half_w, cx + half_w, image_w, n)
            targets[lvl].class_targets[i0 : i1 + 1, j0 : j1 + 1] = category
            targets[lvl].instance_index[i0 : i1 + 1, j0 : j1 + 1] = k
    return targets


def focal_loss(logits: Tensor, class_targets: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Per-class sigmoid focal loss, summed and normalized by positive count.

    ``class_targets`` holds 0 for background cells, otherwise the 1-based
    category whose channel is the positive one.
    """
    cells, m = logits.shape
    targets = np.zeros((cells, m), dtype=logits.dtype)
    idx = np.nonzero(class_targets > 0)[0]
    targets[idx, class_targets[idx] - 1] = 1.0
    t = ad.Tensor(targets)
    one = ad.Tensor(np.ones((), dtype=logits.dtype))
    p = ad.sigmoid(logits)
    pt = t * p + (one - t) * (one - p)
    # log(pt) via softplus keeps extreme logits finite
    log_pt = t * (-ad.softplus(-logits)) + (one - t) * (-ad.softplus(logits))
    alpha_t = ad.Tensor(np.where(targets > 0, alpha, 1.0 - alpha).astype(logits.dtype))
    loss = -alpha_t * (one - pt) ** gamma * log_pt
    normalizer = max(1, int(idx.size))
    return loss.sum() / float(normalizer)


def dice_loss(pred_soft: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Soft dice loss per mask; accepts [H, W] or a batched [R, H, W] stack.

    Returns a scalar for a single mask, or the [R] per-mask vector.
    """
    gt = ad.Tensor(np.asarray(gt_mask, dtype=pred_soft.dtype))
    if pred_soft.shape != gt.shape:
        raise ConfigError(f"pred/gt shape mismatch: {pred_soft.shape} vs {gt.shape}")
    axes = tuple(range(pred_soft.ndim - 2, pred_soft.ndim))
    inter = (pred_soft * gt).sum(axis=axes)
    denom = (pred_soft * pred_soft).sum(axis=axes) + (gt * gt).sum(axis=axes)
    eps = ad.Tensor(np.full((), DICE_EPS, dtype=pred_soft.dtype))
    one = ad.Tensor(np.ones((), dtype=pred_soft.dtype))
    return one - (2.0 * inter + eps) / (denom + eps)


def total_loss(cls_loss: Tensor, dice_losses: Tensor | None, lambda_mask: float = 3.0) -> Tensor:
    """cls + lambda * mean dice over positive cells; errors on non-finite terms."""
    if not np.isfinite(cls_loss.item()):
        raise TrainingError("classification loss is not finite")
    if dice_losses is None or dice_losses.size == 0 or lambda_mask == 0.0:
        return cls_loss
    if not np.all(np.isfinite(dice_losses.data)):
        raise TrainingError("mask loss is not finite")
    return cls_loss + lambda_mask * dice_losses.mean()


def mask_iou_matrix(masks: np.ndarray, binarize_at: float = 0.5) -> np.ndarray:
    """Pairwise IoU of binarized masks, shape [R, R]."""
    flat = (masks >= binarize_at).reshape(len(masks), -1).astype(np.float64)
    inter = flat @ flat.T
    areas = flat.sum(axis=1)
    union = areas[:, None] + areas[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def matrix_nms(instances: InstanceSet, cfg: NmsConfig) -> InstanceSet:
    """Decay every score by its worst-case overlap with higher-scored masks.

    decay_j = min over higher-scored i of f(iou_ij) / f(max_k iou_ki), with
    f(x) = 1 - x (linear) or exp(-x^2 / sigma) (gaussian).
    """
    r = len(instances)
    if r == 0:
        return instances
    order = np.lexsort((np.arange(r), -instances.scores))  # score desc, index asc on ties
    inst = instances.select(order)
    iou = np.triu(mask_iou_matrix(inst.masks), k=1)  # iou[i, j] for i < j
    compensate = iou.max(axis=0)  # max overlap of each instance with any higher-scored one
    comp_matrix = np.tile(compensate[:, None], (1, r))
    if cfg.kernel == "gaussian":
        decay_matrix = np.exp(-(iou**2 - comp_matrix**2) / cfg.sigma)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            decay_matrix = (1.0 - iou) / (1.0 - comp_matrix)
    # a fully-compensated suppressor (comp == 1) contributes no suppression
    decay_matrix = np.where(np.isnan(decay_matrix), np.inf, decay_matrix)
    decay_matrix = np.where(np.triu(np.ones((r, r), dtype=bool), k=1), decay_matrix, np.inf)
    decay = np.minimum(decay_matrix.min(axis=0), 1.0)
    decay[0] = 1.0
    new_scores = (inst.scores * decay).astype(np.float32)
    keep = np.nonzero(new_scores >= cfg.post_nms_score)[0]
    reordered = np.lexsort((order[keep], -new_scores[keep]))  # ties fall back to input order
    keep = keep[reordered][: cfg.max_instances]
    result = inst.select(keep)
    result.scores = new_scores[keep]
    return result
