"""Greedy-matching average precision over binarized masks, COCO-style metrics
(AP@0.5, AP@0.75, mAP over 0.5:0.05:0.95, and size-bucketed APs)."""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .data import SceneSample
from .errors import UsageError
from .losses import matrix_nms
from .maskgen import InstanceSet, decode_instances, instances_to_manifest
from .pipeline import SegmentationModel

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# pixel-area cutoffs for small/medium/large buckets at desk scale
SIZE_BUCKETS = {"S": (0.0, 322.0), "M": (322.0, 962.0), "L": (962.0, float("inf"))}
BINARIZE_AT = 0.5


def predict(model: SegmentationModel, sample: SceneSample, cfg: RunConfig) -> InstanceSet:
    with ad.no_grad():
        outputs = model(Tensor(sample.image))
        raw = decode_instances(outputs.class_logits, outputs.kernels, outputs.mask_feature,
                               model.grid_spec, cfg.score_threshold, cfg.image_h, cfg.image_w)
    return matrix_nms(raw, cfg.nms_config())


def _pairwise_iou(pred_masks: list[np.ndarray], gt_masks: list[np.ndarray]) -> np.ndarray:
    if not pred_masks or not gt_masks:
        return np.zeros((len(pred_masks), len(gt_masks)))
    p = np.stack(pred_masks).reshape(len(pred_masks), -1).astype(np.float64)
    g = np.stack(gt_masks).reshape(len(gt_masks), -1).astype(np.float64)
    inter = p @ g.T
    union = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _average_precision(scores, matched_flags, ignored_flags, num_gt) -> float | None:
    """All-point interpolated AP from per-prediction TP/ignore flags."""
    if num_gt == 0:
        return None
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(matched_flags, dtype=bool)[order]
    ignore = np.asarray(ignored_flags, dtype=bool)[order]
    tp = tp[~ignore]
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
    # monotone precision envelope, then rectangle areas over recall steps
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p, is_tp in zip(recall, precision, tp):
        if is_tp:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


class _CategoryEval:
    """Cached per-image prediction/gt data and IoU matrices for one category."""

    def __init__(self):
        self.images: dict[int, dict] = {}

    def add_image(self, img_id: int, pred_scores: list[float], pred_masks: list[np.ndarray],
                  gt_masks: list[np.ndarray], gt_areas: list[float]):
        self.images[img_id] = {
            "scores": np.asarray(pred_scores, dtype=np.float64),
            "iou": _pairwise_iou(pred_masks, gt_masks),
            "areas": np.asarray(gt_areas, dtype=np.float64),
        }

    def num_gt(self, bucket) -> int:
        return sum(int(np.sum(self._in_bucket(rec, bucket))) for rec in self.images.values())

    @staticmethod
    def _in_bucket(rec, bucket) -> np.ndarray:
        if bucket is None:
            return np.ones(len(rec["areas"]), dtype=bool)
        lo, hi = bucket
        return (rec["areas"] >= lo) & (rec["areas"] < hi)

    def ap(self, threshold: float, bucket) -> float | None:
        num_gt = self.num_gt(bucket)
        if num_gt == 0:
            return None
        scores, matched, ignored = [], [], []
        for rec in self.images.values():
            order = np.argsort(-rec["scores"], kind="stable")
            taken = np.zeros(len(rec["areas"]), dtype=bool)
            in_bucket = self._in_bucket(rec, bucket)
            for pi in order:
                ious = rec["iou"][pi] if rec["iou"].size else np.zeros(0)
                best_gi, best_iou = -1, threshold
                for gi in range(len(ious)):
                    if not taken[gi] and ious[gi] >= best_iou:
                        best_gi, best_iou = gi, ious[gi]
                scores.append(rec["scores"][pi])
                if best_gi >= 0:
                    taken[best_gi] = True
                    matched.append(bool(in_bucket[best_gi]))
                    ignored.append(not in_bucket[best_gi])  # matched out of bucket: ignore
                else:
                    matched.append(False)
                    ignored.append(False)
        return _average_precision(scores, matched, ignored, num_gt)


def compute_metrics(predictions_per_image: list[InstanceSet],
                    samples: list[SceneSample]) -> dict[str, float]:
    """predictions_per_image[i] pairs with samples[i]."""
    if not samples:
        raise UsageError("cannot evaluate an empty dataset")
    categories = sorted({int(c) for s in samples for c in s.categories})
    evals = {c: _CategoryEval() for c in categories}

    for img_id, (inst, sample) in enumerate(zip(predictions_per_image, samples)):
        for c in categories:
            pk = [k for k in range(len(inst)) if int(inst.categories[k]) == c]
            gk = [k for k in range(len(sample.masks)) if int(sample.categories[k]) == c]
            evals[c].add_image(
                img_id,
                [float(inst.scores[k]) for k in pk],
                [inst.masks[k] >= BINARIZE_AT for k in pk],
                [sample.masks[k].astype(bool) for k in gk],
                [float(sample.masks[k].sum()) for k in gk],
            )

    def ap_at(threshold: float, bucket) -> float | None:
        vals = [evals[c].ap(threshold, bucket) for c in categories]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def mean_over_thresholds(bucket) -> float:
        vals = [ap_at(t, bucket) for t in IOU_THRESHOLDS]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    metrics = {
        "AP50": ap_at(0.5, None) or 0.0,
        "AP75": ap_at(0.75, None) or 0.0,
        "mAP": mean_over_thresholds(None),
    }
    for name, bucket in SIZE_BUCKETS.items():
        metrics[f"AP_{name}"] = mean_over_thresholds(bucket)
    return metrics


def evaluate(model: SegmentationModel, samples: list[SceneSample], cfg: RunConfig,
             dump_path: str | None = None) -> dict[str, float]:
    if not samples:
        raise UsageError("cannot evaluate an empty dataset")
    predictions = [predict(model, s, cfg) for s in samples]
    if dump_path:
        with open(dump_path, "w", encoding="utf-8") as fh:
            for img_id, inst in enumerate(predictions):
                fh.write(json.dumps(instances_to_manifest(img_id, inst, BINARIZE_AT)) + "\n")
    return compute_metrics(predictions, samples)
