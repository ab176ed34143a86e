"""Encoder layer variants: identity-by-zero, shape, stacking, determinism."""

import numpy as np
import pytest

from twinseg import autodiff as ad
from twinseg import layers as L
from twinseg.attention import AttentionConfig, PositionalEmbeddings
from twinseg.errors import ConfigError


def _setup(n=3, c=8, heads=2, seed=0):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(embed_dim=c, heads=heads, grid_n=n)
    pe = PositionalEmbeddings(n, n, c, rng)
    p = ad.Tensor(rng.normal(size=(n, n, c)).astype(np.float32))
    return rng, cfg, pe, p


def _zero_residual_outputs(layer):
    """Zero every weight that closes a residual branch."""
    for attn in ("attn", "column", "row"):
        if hasattr(layer, attn):
            getattr(layer, attn).wo.data[...] = 0
            getattr(layer, attn).bo.data[...] = 0
    for convs in ("column_convs", "row_convs"):
        if hasattr(layer, convs):
            getattr(layer, convs).conv2.weight.data[...] = 0
            getattr(layer, convs).conv2.bias.data[...] = 0
    layer.mlp.fc2.weight.data[...] = 0
    layer.mlp.fc2.bias.data[...] = 0


def test_original_layer_identity_when_residual_outputs_zero():
    rng, cfg, pe, p = _setup()
    layer = L.OriginalLayer(cfg, rng)
    _zero_residual_outputs(layer)
    x = p.reshape(9, 8)
    assert np.allclose(layer(x).data, x.data, atol=1e-7)


def test_pure_twin_layer_identity_when_residual_outputs_zero():
    rng, cfg, pe, p = _setup()
    layer = L.PureTwinLayer(cfg, rng)
    _zero_residual_outputs(layer)
    assert np.allclose(layer(p, pe).data, p.data, atol=1e-7)


def test_hybrid_twin_layer_identity_when_residual_outputs_zero():
    rng, cfg, pe, p = _setup()
    layer = L.HybridTwinLayer(cfg, rng)
    _zero_residual_outputs(layer)
    assert np.allclose(layer(p, pe).data, p.data, atol=1e-7)


@pytest.mark.parametrize("kind", L.VARIANTS)
def test_shape_preserved(kind):
    rng, cfg, pe, p = _setup()
    enc = L.Encoder(L.LayerVariant(kind, depth=2), cfg, rng)
    assert enc(p, pe).shape == p.shape


def test_hybrid_equals_pure_when_conv_pairs_identity():
    # identity conv pairs: center tap is the identity map; the leaky relu
    # between them is linear on positive inputs, which a large output-
    # projection bias guarantees
    rng, cfg, pe, p = _setup(seed=3)
    hybrid = L.HybridTwinLayer(cfg, rng)
    pure = L.PureTwinLayer(cfg, np.random.default_rng(99))
    for src, dst in ((hybrid.column, pure.column), (hybrid.row, pure.row)):
        for name in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
            getattr(dst, name).data = getattr(src, name).data.copy()
    for name in ("norm1", "norm2"):
        getattr(pure, name).gain.data = getattr(hybrid, name).gain.data.copy()
        getattr(pure, name).bias.data = getattr(hybrid, name).bias.data.copy()
    pure.mlp.fc1.weight.data = hybrid.mlp.fc1.weight.data.copy()
    pure.mlp.fc1.bias.data = hybrid.mlp.fc1.bias.data.copy()
    pure.mlp.fc2.weight.data = hybrid.mlp.fc2.weight.data.copy()
    pure.mlp.fc2.bias.data = hybrid.mlp.fc2.bias.data.copy()
    for attn in (hybrid.column, hybrid.row, pure.column, pure.row):
        attn.bo.data[...] = 10.0  # keep attention outputs positive
    for convs in (hybrid.column_convs, hybrid.row_convs):
        for conv in (convs.conv1, convs.conv2):
            conv.weight.data[...] = 0
            c = conv.weight.shape[0]
            conv.weight.data[np.arange(c), np.arange(c), 1, 1] = 1.0
            conv.bias.data[...] = 0
    out_h = hybrid(p, pe)
    out_p = pure(p, pe)
    assert np.allclose(out_h.data, out_p.data, atol=1e-5)


def test_encode_depth_1_equals_single_layer_call():
    rng, cfg, pe, p = _setup()
    enc = L.Encoder(L.LayerVariant("pure_twin", depth=1), cfg, rng)
    assert np.array_equal(enc(p, pe).data, enc.layers[0](p, pe).data)


def test_encode_depth_2_equals_manual_composition():
    rng, cfg, pe, p = _setup()
    enc = L.Encoder(L.LayerVariant("hybrid_twin", depth=2), cfg, rng)
    manual = enc.layers[1](enc.layers[0](p, pe), pe)
    assert np.array_equal(enc(p, pe).data, manual.data)


@pytest.mark.parametrize("depth", [1, 2, 6, 12])
def test_depth_sweep_no_shape_drift(depth):
    rng, cfg, pe, p = _setup(n=2, c=8)
    enc = L.Encoder(L.LayerVariant("pure_twin", depth=depth), cfg, rng)
    assert enc(p, pe).shape == p.shape


def test_encode_deterministic_bit_for_bit():
    rng, cfg, pe, p = _setup()
    enc = L.Encoder(L.LayerVariant("hybrid_twin", depth=2), cfg, rng)
    a = enc(p, pe).data.tobytes()
    b = enc(p, pe).data.tobytes()
    assert a == b


def test_post_norm_flag_changes_wiring_but_not_shape():
    rng, cfg, pe, p = _setup()
    pre = L.Encoder(L.LayerVariant("original", depth=1, post_norm=False), cfg, rng)
    post = L.Encoder(L.LayerVariant("original", depth=1, post_norm=True), cfg, np.random.default_rng(0))
    assert pre(p, pe).shape == post(p, pe).shape == p.shape


def test_layer_flops_hybrid_exceeds_pure_by_four_convs():
    for n, c in ((4, 16), (12, 64)):
        delta = L.layer_flops("hybrid_twin", n, c) - L.layer_flops("pure_twin", n, c)
        assert delta == 4 * 9 * n * n * c * c


def test_layer_variant_validation():
    with pytest.raises(ConfigError):
        L.LayerVariant("fancy", depth=2)
    with pytest.raises(ConfigError):
        L.LayerVariant("original", depth=0)


def test_layer_gradient_audits():
    from twinseg.gradcheck import run_check

    for name in ("layer_original", "layer_pure_twin", "layer_hybrid_twin"):
        assert run_check(name, seed=5, dtype=np.float64) < 1e-6, name
