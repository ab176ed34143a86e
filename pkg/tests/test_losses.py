"""Assignment rules, focal/dice formula oracles, total loss, matrix suppression."""

import numpy as np
import pytest

from twinseg import autodiff as ad
from twinseg.errors import ConfigError, DataError
from twinseg.heads import GridSpec
from twinseg.losses import (
    AssignmentConfig,
    NmsConfig,
    assign_targets,
    dice_loss,
    focal_loss,
    mask_iou_matrix,
    matrix_nms,
    total_loss,
)
from twinseg.maskgen import InstanceSet

SPEC = GridSpec(grid_sizes=(12, 10, 8, 6, 4), classes=3, mask_channels=8)
ACFG = AssignmentConfig(scale_ranges=((1, 16), (8, 32), (16, 64), (32, 128), (64, 256)),
                        center_fraction=0.2)


def _disk_mask(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)


def test_assign_single_small_object_centroid_cell_only():
    h = w = 128
    cy, cx = 61.0, 67.0  # generic position, away from cell boundaries
    mask = _disk_mask(h, w, cy, cx, 5)  # sqrt(area) = 9: levels P2 and P3
    targets = assign_targets([(mask, 2, (cy, cx))], SPEC, ACFG, h, w)
    for lvl, (n, tgt) in enumerate(zip(SPEC.grid_sizes, targets)):
        scale = np.sqrt(mask.sum())
        lo, hi = ACFG.scale_ranges[lvl]
        lo = 0 if lvl == 0 else lo
        hi = np.inf if lvl == 4 else hi
        positives = np.argwhere(tgt.class_targets > 0)
        if lo <= scale <= hi:
            centroid_cell = (int(cy / (h / n)), int(cx / (w / n)))
            assert positives.tolist() == [list(centroid_cell)]
            assert tgt.class_targets[centroid_cell] == 2
            assert tgt.instance_index[centroid_cell] == 0
        else:
            assert positives.size == 0


def test_assign_empty_scene_all_background():
    targets = assign_targets([], SPEC, ACFG, 128, 128)
    for tgt in targets:
        assert (tgt.class_targets == 0).all()
        assert (tgt.instance_index == -1).all()


def test_assign_zero_area_mask_rejected():
    with pytest.raises(DataError):
        assign_targets([(np.zeros((64, 64), dtype=np.uint8), 1, (32.0, 32.0))], SPEC, ACFG, 64, 64)


def _brute_force_assignment(instances, spec, cfg, image_h, image_w):
    """Independent per-cell rule evaluation."""
    results = []
    areas = [float(m.sum()) for m, _, _ in instances]
    for lvl, n in enumerate(spec.grid_sizes):
        cls = np.zeros((n, n), dtype=np.int64)
        idx = np.full((n, n), -1, dtype=np.int64)
        cell_h, cell_w = image_h / n, image_w / n
        for i in range(n):
            for j in range(n):
                best_k, best_area = -1, np.inf
                for k, (mask, cat, (cy, cx)) in enumerate(instances):
                    scale = np.sqrt(areas[k])
                    lo, hi = cfg.scale_ranges[lvl]
                    lo = 0.0 if lvl == 0 else lo
                    hi = np.inf if lvl == len(spec.grid_sizes) - 1 else hi
                    if not lo <= scale <= hi:
                        continue
                    ys, xs = np.nonzero(mask)
                    bh = float(ys.max() - ys.min() + 1) * cfg.center_fraction / 2
                    bw = float(xs.max() - xs.min() + 1) * cfg.center_fraction / 2
                    ry0, ry1 = np.clip([cy - bh, cy + bh], 0, image_h - 1e-9)
                    rx0, rx1 = np.clip([cx - bw, cx + bw], 0, image_w - 1e-9)
                    # closed region vs half-open cell [i*ch, (i+1)*ch)
                    if not (ry0 < (i + 1) * cell_h and ry1 >= i * cell_h):
                        continue
                    if not (rx0 < (j + 1) * cell_w and rx1 >= j * cell_w):
                        continue
                    if areas[k] < best_area or (areas[k] == best_area):
                        best_k, best_area = k, areas[k]
                if best_k >= 0:
                    cls[i, j] = instances[best_k][1]
                    idx[i, j] = best_k
        results.append((cls, idx))
    return results


def test_assign_two_scales_matches_brute_force_oracle():
    h = w = 128
    small = _disk_mask(h, w, 30, 30, 6)
    big = _disk_mask(h, w, 80, 90, 25)
    instances = [(small, 1, (30.0, 30.0)), (big, 3, (80.0, 90.0))]
    targets = assign_targets(instances, SPEC, ACFG, h, w)
    oracle = _brute_force_assignment(instances, SPEC, ACFG, h, w)
    for tgt, (cls_ref, idx_ref) in zip(targets, oracle):
        assert np.array_equal(tgt.class_targets, cls_ref)
        assert np.array_equal(tgt.instance_index, idx_ref)


def test_assign_every_positive_maps_to_one_instance():
    rng = np.random.default_rng(0)
    h = w = 128
    instances = []
    for k in range(3):
        r = rng.uniform(8, 25)
        cy, cx = rng.uniform(r, h - r, size=2)
        m = _disk_mask(h, w, cy, cx, r)
        instances.append((m, int(rng.integers(1, 4)), (float(cy), float(cx))))
    targets = assign_targets(instances, SPEC, ACFG, h, w)
    for tgt in targets:
        pos = tgt.instance_index >= 0
        assert ((tgt.class_targets > 0) == pos).all()
        assert np.isin(tgt.instance_index[pos], np.arange(len(instances))).all()


def test_focal_gamma0_alpha_half_is_scaled_bce():
    rng = np.random.default_rng(1)
    logits_val = rng.normal(size=(5, 3)).astype(np.float64)
    targets = np.array([0, 1, 2, 3, 0])
    with ad.using_dtype(np.float64):
        loss = focal_loss(ad.Tensor(logits_val), targets, alpha=0.5, gamma=0.0)
    # direct scalar-formula evaluation
    p = 1.0 / (1.0 + np.exp(-logits_val))
    t = np.zeros_like(p)
    for i, c in enumerate(targets):
        if c > 0:
            t[i, c - 1] = 1.0
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    expected = 0.5 * bce.sum() / max(1, int((targets > 0).sum()))
    assert abs(loss.item() - expected) < 1e-12


def test_focal_perfect_prediction_near_zero():
    logits = ad.Tensor(np.array([[20.0, -20.0], [-20.0, 20.0]], dtype=np.float32))
    loss = focal_loss(logits, np.array([1, 2]))
    assert loss.item() < 1e-6


def test_focal_random_case_matches_formula_oracle():
    rng = np.random.default_rng(2)
    logits_val = rng.normal(size=(4, 3)).astype(np.float64) * 2
    targets = np.array([2, 0, 1, 3])
    alpha, gamma = 0.25, 2.0
    with ad.using_dtype(np.float64):
        loss = focal_loss(ad.Tensor(logits_val), targets, alpha=alpha, gamma=gamma)
    p = 1.0 / (1.0 + np.exp(-logits_val))
    t = np.zeros_like(p)
    for i, c in enumerate(targets):
        if c > 0:
            t[i, c - 1] = 1.0
    pt = t * p + (1 - t) * (1 - p)
    at = t * alpha + (1 - t) * (1 - alpha)
    fl = -(at * (1 - pt) ** gamma * np.log(pt)).sum() / max(1, int((targets > 0).sum()))
    assert abs(loss.item() - fl) < 1e-12


def test_focal_monotone_decreasing_in_pt():
    values = []
    for logit in (-2.0, 0.0, 2.0, 5.0):
        loss = focal_loss(ad.Tensor(np.array([[logit]], dtype=np.float64)), np.array([1]))
        values.append(loss.item())
    assert all(a > b for a, b in zip(values, values[1:]))
    assert all(v >= 0 for v in values)


def test_dice_binary_equal_masks_near_zero():
    rng = np.random.default_rng(3)
    gt = (rng.random((40, 40)) < 0.7).astype(np.float64)  # >= 1000 positive px
    assert gt.sum() >= 1000
    loss = dice_loss(ad.Tensor(gt), gt)
    assert 0 <= loss.item() < 1e-3


def test_dice_half_pred_half_gt_hand_formula():
    h = w = 20
    pred = ad.Tensor(np.full((h, w), 0.5))
    gt = np.zeros((h, w))
    gt[:, : w // 2] = 1.0
    loss = dice_loss(pred, gt)
    inter = 0.5 * gt.sum()
    denom = 0.25 * h * w + gt.sum()
    expected = 1 - (2 * inter + 1) / (denom + 1)
    assert abs(loss.item() - expected) < 1e-6


def test_dice_empty_gt_zero_pred_exactly_zero():
    loss = dice_loss(ad.Tensor(np.zeros((8, 8))), np.zeros((8, 8)))
    assert loss.item() == 0.0


def test_dice_symmetric_for_binary_pred():
    rng = np.random.default_rng(4)
    a = (rng.random((16, 16)) < 0.4).astype(np.float64)
    b = (rng.random((16, 16)) < 0.4).astype(np.float64)
    assert abs(dice_loss(ad.Tensor(a), b).item() - dice_loss(ad.Tensor(b), a).item()) < 1e-12


def test_dice_batched_matches_individual():
    rng = np.random.default_rng(5)
    preds = rng.random((3, 10, 10))
    gts = (rng.random((3, 10, 10)) < 0.5).astype(np.float64)
    batched = dice_loss(ad.Tensor(preds), gts)
    for k in range(3):
        single = dice_loss(ad.Tensor(preds[k]), gts[k])
        assert abs(batched.data[k] - single.item()) < 1e-12


def test_total_loss_no_positives_is_cls():
    cls = ad.Tensor(np.asarray(0.37))
    assert total_loss(cls, None, 3.0).item() == pytest.approx(0.37)


def test_total_loss_composition():
    cls = ad.Tensor(np.asarray(0.5))
    dice = ad.Tensor(np.array([0.2, 0.4]))
    out = total_loss(cls, dice, 3.0)
    assert out.item() == pytest.approx(0.5 + 3.0 * 0.3)


def test_total_loss_nan_raises():
    from twinseg.errors import TrainingError

    with pytest.raises(TrainingError):
        total_loss(ad.Tensor(np.asarray(np.nan)), None, 3.0)


def _instances(masks, scores):
    masks = np.asarray(masks, dtype=np.float32)
    return InstanceSet(masks=masks, scores=np.asarray(scores, dtype=np.float32),
                       categories=np.ones(len(masks), dtype=np.int64),
                       provenance=[("P2", 0, k) for k in range(len(masks))])


def test_nms_disjoint_masks_scores_unchanged():
    m = np.zeros((2, 10, 10), dtype=np.float32)
    m[0, :5] = 1
    m[1, 5:] = 1
    out = matrix_nms(_instances(m, [0.7, 0.6]), NmsConfig(post_nms_score=0.0))
    assert np.allclose(out.scores, [0.7, 0.6])


def test_nms_identical_masks_linear_hand_formula():
    m = np.zeros((2, 10, 10), dtype=np.float32)
    m[:, 2:8, 2:8] = 1
    out = matrix_nms(_instances(m, [0.9, 0.8]), NmsConfig(kernel="linear", post_nms_score=0.0))
    # decay = (1 - iou) / (1 - cmax) = (1 - 1) / (1 - 0) = 0
    assert np.allclose(out.scores, [0.9, 0.0])


def test_nms_identical_masks_gaussian_hand_formula():
    m = np.zeros((2, 10, 10), dtype=np.float32)
    m[:, 2:8, 2:8] = 1
    sigma = 2.0
    out = matrix_nms(_instances(m, [0.9, 0.8]), NmsConfig(kernel="gaussian", sigma=sigma,
                                                          post_nms_score=0.0))
    expected = 0.8 * np.exp(-(1.0 - 0.0) / sigma)
    assert np.allclose(out.scores, [0.9, expected], atol=1e-6)


def test_nms_single_instance_unchanged():
    m = np.ones((1, 6, 6), dtype=np.float32)
    out = matrix_nms(_instances(m, [0.4]), NmsConfig(post_nms_score=0.0))
    assert np.allclose(out.scores, [0.4])


def test_nms_drops_below_threshold_and_caps():
    m = np.zeros((3, 8, 8), dtype=np.float32)
    m[0, :3] = 1
    m[1, 3:5] = 1
    m[2, 5:] = 1
    cfg = NmsConfig(post_nms_score=0.5, max_instances=1)
    out = matrix_nms(_instances(m, [0.9, 0.6, 0.2]), cfg)
    assert len(out) == 1 and out.scores[0] == pytest.approx(0.9)


def test_nms_never_increases_scores_property():
    rng = np.random.default_rng(6)
    for trial in range(200):
        r = int(rng.integers(1, 8))
        masks = (rng.random((r, 12, 12)) < rng.uniform(0.2, 0.8)).astype(np.float32)
        scores = rng.uniform(0.01, 1.0, size=r).astype(np.float32)
        inst = _instances(masks, scores)
        out = matrix_nms(inst, NmsConfig(kernel="gaussian" if trial % 2 else "linear",
                                         sigma=float(rng.uniform(0.5, 3.0)),
                                         post_nms_score=0.0, max_instances=100))
        by_origin = {tuple(p): s for p, s in zip(inst.provenance, inst.scores)}
        for p, s in zip(out.provenance, out.scores):
            original = by_origin[tuple(p)]
            decay = s / original if original > 0 else 1.0
            assert s <= original + 1e-6
            assert 0.0 < decay <= 1.0 + 1e-6
        assert list(out.scores) == sorted(out.scores, reverse=True)


def test_iou_matrix_values():
    masks = np.zeros((2, 4, 4), dtype=np.float32)
    masks[0, :2] = 1
    masks[1, 1:3] = 1
    iou = mask_iou_matrix(masks)
    assert iou[0, 1] == pytest.approx(4 / 12)
    assert iou[0, 0] == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        NmsConfig(kernel="cubic")
    with pytest.raises(ConfigError):
        NmsConfig(sigma=0.0)
    with pytest.raises(ConfigError):
        AssignmentConfig(scale_ranges=((1, 16),), center_fraction=0.2)
    with pytest.raises(ConfigError):
        AssignmentConfig(scale_ranges=((1, 16), (8, 32), (16, 64), (32, 128), (64, 256)),
                         center_fraction=0.0)
