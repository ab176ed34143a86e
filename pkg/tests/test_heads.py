"""Patch recombination and the shared per-cell heads."""

import numpy as np
import pytest

from twinseg import autodiff as ad
from twinseg import nn
from twinseg.errors import ConfigError
from twinseg.heads import ClassHead, GridSpec, KernelHead, patchify


def _identity_projection(dim):
    proj = nn.Linear(dim, dim, np.random.default_rng(0))
    proj.weight.data = np.eye(dim, dtype=np.float32)
    proj.bias.data = np.zeros(dim, dtype=np.float32)
    return proj


def test_grid_spec_kernel_dim_formula():
    spec = GridSpec(grid_sizes=(12, 10, 8, 6, 4), classes=3, mask_channels=16, kernel_size=3)
    assert spec.kernel_dim == 9 * 16
    spec1 = GridSpec(grid_sizes=(12, 10, 8, 6, 4), classes=3, mask_channels=16, kernel_size=1)
    assert spec1.kernel_dim == 16


def test_grid_spec_validation():
    with pytest.raises(ConfigError):
        GridSpec(grid_sizes=(4, 6, 8, 10, 12), classes=3, mask_channels=8)  # increasing
    with pytest.raises(ConfigError):
        GridSpec(grid_sizes=(12, 10, 8, 6), classes=3, mask_channels=8)  # wrong count


def test_patchify_identity_layout_transpose():
    rng = np.random.default_rng(1)
    feat = rng.normal(size=(4, 6, 6)).astype(np.float32)
    out = patchify(ad.Tensor(feat), 6, _identity_projection(4))
    assert out.shape == (6, 6, 4)
    assert np.allclose(out.data, feat.transpose(1, 2, 0), atol=1e-6)


def test_patchify_constant_map():
    feat = np.full((3, 10, 14), 2.5, dtype=np.float32)
    out = patchify(ad.Tensor(feat), 5, _identity_projection(3))
    assert np.allclose(out.data, 2.5, atol=1e-6)


def test_patchify_ramp_matches_hand_bilinear():
    # 1-d ramp over width 8 downsampled to 4 cells; sample points from the
    # align_corners=False formula: s = (o + 0.5) * (in/out) - 0.5
    ramp = np.arange(8, dtype=np.float32)
    feat = np.tile(ramp, (1, 8, 1)).astype(np.float32)
    out = patchify(ad.Tensor(feat), 4, _identity_projection(1))
    expected = [(o + 0.5) * 2 - 0.5 for o in range(4)]
    assert np.allclose(out.data[0, :, 0], expected, atol=1e-6)


def test_class_head_zero_weights_give_bias():
    rng = np.random.default_rng(2)
    head = ClassHead(8, 3, rng, prior=0.01)
    head.proj.weight.data[...] = 0
    out = head(ad.Tensor(rng.normal(size=(5, 5, 8)).astype(np.float32)))
    expected_bias = -np.log(0.99 / 0.01)
    assert np.allclose(out.data, expected_bias, atol=1e-5)
    assert out.shape == (5, 5, 3)


def test_heads_shapes_per_level():
    rng = np.random.default_rng(3)
    spec = GridSpec(grid_sizes=(12, 10, 8, 6, 4), classes=3, mask_channels=16)
    cls_head = ClassHead(8, spec.classes, rng)
    krn_head = KernelHead(8, spec.kernel_dim, rng)
    for n in spec.grid_sizes:
        x = ad.Tensor(rng.normal(size=(n, n, 8)).astype(np.float32))
        assert cls_head(x).shape == (n, n, spec.classes)
        assert krn_head(x).shape == (n, n, spec.kernel_dim)


def test_head_weight_sharing_swapping_inputs_swaps_outputs():
    rng = np.random.default_rng(4)
    head = ClassHead(8, 3, rng)
    a = ad.Tensor(rng.normal(size=(6, 6, 8)).astype(np.float32))
    b = ad.Tensor(rng.normal(size=(6, 6, 8)).astype(np.float32))
    out_a, out_b = head(a), head(b)
    assert np.array_equal(head(b).data, out_b.data)
    assert np.array_equal(head(a).data, out_a.data)
    assert not np.allclose(out_a.data, out_b.data)


def test_parallel_heads_consume_same_encoding():
    rng = np.random.default_rng(5)
    cls_head = ClassHead(8, 3, rng)
    krn_head = KernelHead(8, 16, rng)
    x = ad.parameter(rng.normal(size=(4, 4, 8)).astype(np.float32))
    (cls_head(x).sum() + krn_head(x).sum()).backward()
    assert np.abs(x.grad).min() >= 0 and np.abs(x.grad).sum() > 0
    base_c = cls_head(x).data.copy()
    base_k = krn_head(x).data.copy()
    x2 = ad.Tensor(x.data + 0.1)
    assert not np.allclose(cls_head(x2).data, base_c)
    assert not np.allclose(krn_head(x2).data, base_k)


def test_kernel_head_supervised_only_by_mask_loss():
    """Zeroing the mask term must zero kernel-head gradients."""
    import dataclasses

    from twinseg.config import RunConfig
    from twinseg.data import generate_sample
    from twinseg.pipeline import SegmentationModel
    from twinseg.train import sample_losses

    cfg = dataclasses.replace(RunConfig(), lambda_mask=0.0)
    model = SegmentationModel(cfg, np.random.default_rng(0))
    sample = generate_sample(cfg.image_h, cfg.image_w, 2, 3, seed=7)
    total, _, _ = sample_losses(model, sample, cfg)
    total.backward()
    kg = model.kernel_head.proj.weight.grad
    assert kg is None or float(np.abs(kg).sum()) == 0.0

    model.zero_grad()
    cfg2 = dataclasses.replace(cfg, lambda_mask=3.0)
    total2, _, _ = sample_losses(model, sample, cfg2)
    total2.backward()
    kg2 = model.kernel_head.proj.weight.grad
    assert kg2 is not None and float(np.abs(kg2).sum()) > 0
