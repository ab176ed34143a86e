"""Fusion wiring, level substitution, dynamic convolution, decoding, RLE."""

import dataclasses

import numpy as np
import pytest

from twinseg import autodiff as ad
from twinseg.config import RunConfig
from twinseg.errors import ConfigError, DimensionError
from twinseg.heads import GridSpec
from twinseg.maskgen import (
    EncoderFeatureProjection,
    MaskFusion,
    decode_instances,
    dynamic_convolve,
    instances_to_manifest,
    rle_decode,
    rle_encode,
    substituted_level,
)
from twinseg.pipeline import SegmentationModel


def _levels(rng, cf, base):
    p2 = ad.Tensor(rng.uniform(0.1, 1.0, size=(cf, base, base)).astype(np.float32))
    p3 = ad.Tensor(rng.uniform(0.1, 1.0, size=(cf, base // 2, base // 2)).astype(np.float32))
    p4 = ad.Tensor(rng.uniform(0.1, 1.0, size=(cf, base // 4, base // 4)).astype(np.float32))
    p5 = ad.Tensor(rng.uniform(0.1, 1.0, size=(cf, base // 8, base // 8)).astype(np.float32))
    return p2, p3, p4, p5


def test_fusion_zero_inputs_bias_constant():
    rng = np.random.default_rng(0)
    fusion = MaskFusion(4, 8, rng)
    zero = [ad.Tensor(np.zeros((4, s, s), dtype=np.float32)) for s in (16, 8, 4, 2)]
    out = fusion(*zero)
    assert out.shape == (8, 16, 16)
    assert np.all(np.isfinite(out.data))
    flat = out.data.reshape(8, -1)
    assert np.allclose(flat, flat[:, :1], atol=1e-6)  # constant per channel


def test_fusion_output_extent_128():
    rng = np.random.default_rng(1)
    fusion = MaskFusion(8, 16, rng)
    p2, p3, p4, p5 = _levels(rng, 8, 32)
    assert fusion(p2, p3, p4, p5).shape == (16, 32, 32)


def test_fusion_stride_mismatch_raises():
    rng = np.random.default_rng(2)
    fusion = MaskFusion(4, 8, rng)
    p2, p3, p4, p5 = _levels(rng, 4, 16)
    bad_p3 = ad.Tensor(np.zeros((4, 5, 5), dtype=np.float32))
    with pytest.raises(DimensionError):
        fusion(p2, bad_p3, p4, p5)


def test_fusion_identity_stages_equal_sum_of_upsampled_inputs():
    rng = np.random.default_rng(3)
    cf = 4
    fusion = MaskFusion(cf, cf, rng, norm=False)
    for blocks in fusion.stages.values():
        for block in blocks:
            block.conv.weight.data[...] = 0
            block.conv.weight.data[np.arange(cf), np.arange(cf), 1, 1] = 1.0
            block.conv.bias.data[...] = 0
    fusion.pointwise.weight.data[...] = 0
    fusion.pointwise.weight.data[np.arange(cf), np.arange(cf), 0, 0] = 1.0
    fusion.pointwise.bias.data[...] = 0
    p2, p3, p4, p5 = _levels(rng, cf, 16)  # positive inputs: ReLU is identity
    out = fusion(p2, p3, p4, p5)
    expected = (p2.data
                + ad.bilinear_resize(p3.reshape(1, *p3.shape), 16, 16).data[0]
                + ad.bilinear_resize(p4.reshape(1, *p4.shape), 16, 16).data[0]
                + ad.bilinear_resize(p5.reshape(1, *p5.shape), 16, 16).data[0])
    assert np.allclose(out.data, expected, atol=1e-5)


def test_substitution_off_returns_level_unchanged():
    rng = np.random.default_rng(4)
    level = ad.Tensor(rng.normal(size=(8, 4, 4)).astype(np.float32))
    out = substituted_level(level, None, None, enabled=False)
    assert out is level


def test_substitution_shape_matches_level():
    rng = np.random.default_rng(5)
    proj = EncoderFeatureProjection(16, 8, rng)
    level = ad.Tensor(rng.normal(size=(8, 4, 4)).astype(np.float32))
    encoded = ad.Tensor(rng.normal(size=(6, 6, 16)).astype(np.float32))
    out = substituted_level(level, encoded, proj, enabled=True)
    assert out.shape == level.shape


@pytest.mark.parametrize("substitute", ["none", "p5", "p4p5"])
def test_substitution_sweep_downstream_shapes(substitute):
    cfg = dataclasses.replace(RunConfig(), substitute=substitute, train_samples=1, eval_samples=1)
    model = SegmentationModel(cfg, np.random.default_rng(0))
    image = ad.Tensor(np.random.default_rng(1).uniform(0, 1, (3, 128, 128)).astype(np.float32))
    out = model(image)
    assert out.mask_feature.shape == (cfg.mask_channels, 32, 32)
    for level, n in zip(("P2", "P3", "P4", "P5", "P6"), cfg.grid_sizes):
        assert out.class_logits[level].shape == (n, n, cfg.classes)
        assert out.kernels[level].shape == (n, n, model.grid_spec.kernel_dim)


def test_dynamic_convolve_one_hot_selects_channel():
    rng = np.random.default_rng(6)
    feature = ad.Tensor(rng.normal(size=(4, 8, 8)).astype(np.float32))
    kernels = np.zeros((2, 2, 4), dtype=np.float32)
    kernels[0, 0, 2] = 1.0  # first cell selects channel 2
    out = dynamic_convolve(feature, ad.Tensor(kernels), 1)
    assert out.shape == (4, 8, 8)
    assert np.allclose(out.data[0], feature.data[2], atol=1e-6)


def test_dynamic_convolve_zero_kernel_gives_half_soft_mask():
    feature = ad.Tensor(np.random.default_rng(7).normal(size=(4, 6, 6)).astype(np.float32))
    out = dynamic_convolve(feature, ad.Tensor(np.zeros((1, 1, 4), dtype=np.float32)), 1)
    assert np.allclose(out.data, 0.0)
    assert np.allclose(ad.sigmoid(out).data, 0.5)


def test_dynamic_convolve_matches_pointwise_loop_exactly():
    rng = np.random.default_rng(8)
    with ad.using_dtype(np.float64):
        for trial in range(20):
            feature = rng.integers(-4, 5, size=(6, 5, 5)).astype(np.float64)
            kernels = rng.integers(-4, 5, size=(2, 2, 6)).astype(np.float64)
            out = dynamic_convolve(ad.Tensor(feature), ad.Tensor(kernels), 1)
            flat = kernels.reshape(4, 6)
            for cell in range(4):
                for y in range(5):
                    for x in range(5):
                        ref = float(np.dot(flat[cell], feature[:, y, x]))
                        assert out.data[cell, y, x] == ref


def test_dynamic_convolve_matches_conv_loop_lambda3():
    rng = np.random.default_rng(9)
    with ad.using_dtype(np.float64):
        cmask = 3
        feature = rng.integers(-3, 4, size=(cmask, 6, 6)).astype(np.float64)
        kernels = rng.integers(-3, 4, size=(1, 2, 9 * cmask)).astype(np.float64)
        out = dynamic_convolve(ad.Tensor(feature), ad.Tensor(kernels), 3)
        assert out.shape == (2, 6, 6)
        padded = np.pad(feature, ((0, 0), (1, 1), (1, 1)))
        w = kernels.reshape(2, cmask, 3, 3)
        for cell in range(2):
            for y in range(6):
                for x in range(6):
                    acc = 0.0
                    for c in range(cmask):
                        for i in range(3):
                            for j in range(3):
                                acc += padded[c, y + i, x + j] * w[cell, c, i, j]
                    assert out.data[cell, y, x] == acc


def test_dynamic_convolve_linear_in_kernels():
    rng = np.random.default_rng(10)
    feature = ad.Tensor(rng.normal(size=(8, 8, 8)).astype(np.float32))
    k1 = rng.normal(size=(3, 3, 8)).astype(np.float32)
    k2 = rng.normal(size=(3, 3, 8)).astype(np.float32)
    a, b = 0.7, -1.3
    combo = dynamic_convolve(feature, ad.Tensor(a * k1 + b * k2), 1)
    parts = a * dynamic_convolve(feature, ad.Tensor(k1), 1).data + b * dynamic_convolve(feature, ad.Tensor(k2), 1).data
    assert np.abs(combo.data - parts).max() < 1e-5


def test_dynamic_convolve_output_channels_equal_cells():
    rng = np.random.default_rng(11)
    feature = ad.Tensor(rng.normal(size=(4, 8, 8)).astype(np.float32))
    for n in (2, 3, 5):
        kernels = ad.Tensor(rng.normal(size=(n, n, 4)).astype(np.float32))
        assert dynamic_convolve(feature, kernels, 1).shape[0] == n * n


def test_dynamic_convolve_dim_mismatch():
    feature = ad.Tensor(np.zeros((4, 8, 8), dtype=np.float32))
    with pytest.raises(ConfigError):
        dynamic_convolve(feature, ad.Tensor(np.zeros((2, 2, 5), dtype=np.float32)), 1)


def _decode_setup(logit_value):
    spec = GridSpec(grid_sizes=(4, 3, 2, 2, 2), classes=3, mask_channels=4)
    rng = np.random.default_rng(12)
    grids, kernels = {}, {}
    for level, n in zip(("P2", "P3", "P4", "P5", "P6"), spec.grid_sizes):
        grids[level] = ad.Tensor(np.full((n, n, 3), logit_value, dtype=np.float32))
        kernels[level] = ad.Tensor(rng.normal(size=(n, n, 4)).astype(np.float32))
    feature = ad.Tensor(rng.normal(size=(4, 8, 8)).astype(np.float32))
    return spec, grids, kernels, feature


def test_decode_all_negative_empty():
    spec, grids, kernels, feature = _decode_setup(-20.0)
    out = decode_instances(grids, kernels, feature, spec, 0.1, 32, 32)
    assert len(out) == 0
    assert out.masks.shape == (0, 32, 32)


def test_decode_single_cell():
    spec, grids, kernels, feature = _decode_setup(-20.0)
    grids["P3"].data[1, 2, 0] = 3.0
    out = decode_instances(grids, kernels, feature, spec, 0.1, 32, 32)
    assert len(out) == 1
    assert out.categories[0] == 1
    assert out.provenance[0] == ("P3", 1, 2)
    assert out.masks.shape == (1, 32, 32)
    assert np.all((out.masks >= 0) & (out.masks <= 1))


def test_decode_count_matches_exhaustive_scan():
    spec, grids, kernels, feature = _decode_setup(0.0)
    rng = np.random.default_rng(13)
    for level in grids:
        grids[level].data[...] = rng.normal(size=grids[level].shape) * 3
    threshold = 0.4
    out = decode_instances(grids, kernels, feature, spec, threshold, 32, 32)
    expected = 0
    for level in grids:
        probs = 1.0 / (1.0 + np.exp(-grids[level].data))
        expected += int((probs.max(axis=-1) > threshold).sum())
    assert len(out) == expected


def test_rle_roundtrip():
    rng = np.random.default_rng(14)
    for _ in range(10):
        mask = rng.random((13, 9)) < 0.3
        rle = rle_encode(mask)
        assert np.array_equal(rle_decode(rle), mask)
    assert rle_encode(np.zeros((3, 3), dtype=bool))["counts"] == [9]
    ones = rle_encode(np.ones((2, 2), dtype=bool))
    assert ones["counts"] == [0, 4]
    assert np.array_equal(rle_decode(ones), np.ones((2, 2), dtype=bool))


def test_manifest_structure():
    spec, grids, kernels, feature = _decode_setup(-20.0)
    grids["P2"].data[0, 0, 2] = 5.0
    inst = decode_instances(grids, kernels, feature, spec, 0.1, 32, 32)
    manifest = instances_to_manifest(7, inst)
    assert manifest["image_id"] == 7
    assert len(manifest["instances"]) == 1
    entry = manifest["instances"][0]
    assert entry["category"] == 3
    assert entry["level"] == "P2"
    assert set(entry["rle"]) == {"size", "counts"}
