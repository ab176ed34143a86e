"""Registry of finite-difference gradient checks over every differentiable
op and the composite blocks, runnable from the CLI with selectors.

Each check is a setup factory returning (build_loss, named_params); the
runner compares tape gradients against central differences. In 32-bit mode
the difference quotients are evaluated on a float64 twin of the same
computation (same values), so the oracle is not limited by float32 loss
quantization. Primitive ops use the documented step h = 1e-3 * max(1, |x|);
composite blocks stack many piecewise-linear units where that step can cross
activation kinks, so they audit at h = 1e-5 in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionConfig,
    AttentionParams,
    PositionalEmbeddings,
    column_attention,
    dense_mhsa,
    masked_mhsa,
    row_attention,
    same_column_mask,
    twin_attention,
)
from .autodiff import Tensor
from .backbone import Backbone, Fpn
from .errors import UsageError
from .gradaudit import numeric_grad, relative_error
from .layers import HybridTwinLayer, OriginalLayer, PureTwinLayer
from .losses import dice_loss, focal_loss
from .maskgen import MaskFusion, dynamic_convolve

TOLERANCES = {np.float32: 1e-3, np.float64: 1e-6}

OP_STEP = 1e-3
# the difference-quotient twin always runs in float64, so a small step is
# noise-safe and avoids perturbing across activation kinks
COMPOSITE_STEP = {np.float32: 1e-5, np.float64: 1e-5}

# a setup returns (build_loss, [(name, param), ...]); deterministic in seed
Setup = Callable[[int], tuple[Callable[[], Tensor], list[tuple[str, Tensor]]]]


@dataclass
class CheckSpec:
    setup: Setup
    composite: bool = False
    float32_ok: bool = True  # deep spatial stacks are audited in 64-bit only
    max_entries: int = 32
    step: float | None = None  # override; norm+relu stacks need a finer step


def _rand(rng, shape, low=0.2, high=1.5):
    """Values bounded away from zero so kinked ops stay differentiable at the sample."""
    sign = rng.choice([-1.0, 1.0], size=shape)
    return (sign * rng.uniform(low, high, size=shape)).astype(ad.default_dtype())


def _weight_loss(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.normal(size=out.shape).astype(out.dtype))
    return (out * w).sum()


def _unary_setup(fn, low=0.2, high=1.5, positive_only=False) -> Setup:
    def setup(seed: int):
        rng = np.random.default_rng(seed)
        data = _rand(rng, (3, 4), low, high)
        if positive_only:
            data = np.abs(data)
        x = ad.parameter(data)
        return lambda: _weight_loss(fn(x), np.random.default_rng(seed + 2)), [("x", x)]

    return setup


def _binary_setup(fn, low=0.2, high=1.5) -> Setup:
    def setup(seed: int):
        rng = np.random.default_rng(seed)
        a = ad.parameter(_rand(rng, (3, 4), low, high))
        b = ad.parameter(_rand(rng, (3, 4), low, high))
        return (lambda: _weight_loss(fn(a, b), np.random.default_rng(seed + 2)),
                [("a", a), ("b", b)])

    return setup


def _setup_matmul(seed: int):
    rng = np.random.default_rng(seed)
    a = ad.parameter(_rand(rng, (4, 5)))
    b = ad.parameter(_rand(rng, (5, 3)))
    return (lambda: _weight_loss(ad.matmul(a, b), np.random.default_rng(seed + 2)),
            [("a", a), ("b", b)])


def _setup_batched_matmul(seed: int):
    rng = np.random.default_rng(seed)
    a = ad.parameter(_rand(rng, (2, 3, 4)))
    b = ad.parameter(_rand(rng, (4, 5)))  # broadcast batch dims
    return (lambda: _weight_loss(ad.matmul(a, b), np.random.default_rng(seed + 2)),
            [("a", a), ("b", b)])


def _setup_softmax(seed: int):
    rng = np.random.default_rng(seed)
    x = ad.parameter(_rand(rng, (3, 4)))
    return (lambda: _weight_loss(ad.softmax(x, axis=-1), np.random.default_rng(seed + 2)),
            [("x", x)])


def _setup_reductions(seed: int):
    rng = np.random.default_rng(seed)
    x = ad.parameter(_rand(rng, (3, 4, 2)))

    def build():
        r = np.random.default_rng(seed + 2)
        return (_weight_loss(x.sum(axis=1), r) + _weight_loss(x.mean(axis=(0, 2)), r)
                + _weight_loss(x.sum(), r))

    return build, [("x", x)]


def _setup_max(seed: int):
    rng = np.random.default_rng(seed)
    base = rng.permutation(24).astype(ad.default_dtype()).reshape(4, 6) * 0.3  # distinct entries
    x = ad.parameter(base)
    return (lambda: _weight_loss(ad.tmax(x, axis=1), np.random.default_rng(seed + 2)),
            [("x", x)])


def _setup_shape_ops(seed: int):
    rng = np.random.default_rng(seed)
    x = ad.parameter(_rand(rng, (3, 4, 2)))

    def build():
        r = np.random.default_rng(seed + 2)
        y = x.reshape(6, 4).transpose(1, 0)
        z = ad.concat([y, y * 2.0], axis=0)[1:5, :3]
        t = ad.take(x.reshape(12, 2), np.array([0, 3, 3, 7]), axis=0)
        return _weight_loss(z, r) + _weight_loss(t, r)

    return build, [("x", x)]


def _setup_masked_fill(seed: int):
    rng = np.random.default_rng(seed)
    x = ad.parameter(_rand(rng, (4, 4)))
    mask = rng.random((4, 4)) < 0.4

    def build():
        filled = ad.masked_fill(x, mask, -5.0)
        return _weight_loss(ad.softmax(filled, axis=-1), np.random.default_rng(seed + 2))

    return build, [("x", x)]


def _setup_layer_norm(seed: int):
    rng = np.random.default_rng(seed)
    x = ad.parameter(_rand(rng, (2, 6)))
    gain = ad.parameter(np.abs(_rand(rng, (6,))))
    bias = ad.parameter(_rand(rng, (6,)) * 0.1)
    return (lambda: _weight_loss(ad.layer_norm(x, gain, bias), np.random.default_rng(seed + 2)),
            [("x", x), ("gain", gain), ("bias", bias)])


def _setup_group_norm(seed: int):
    rng = np.random.default_rng(seed)
    x = ad.parameter(_rand(rng, (2, 4, 3, 3)))
    gain = ad.parameter(np.abs(_rand(rng, (4,))))
    bias = ad.parameter(_rand(rng, (4,)) * 0.1)
    return (lambda: _weight_loss(ad.group_norm(x, 2, gain, bias), np.random.default_rng(seed + 2)),
            [("x", x), ("gain", gain), ("bias", bias)])


def _setup_conv2d(seed: int):
    rng = np.random.default_rng(seed)
    x = ad.parameter(_rand(rng, (1, 2, 5, 5)))
    w = ad.parameter(_rand(rng, (3, 2, 3, 3)) * 0.5)

    def build():
        r = np.random.default_rng(seed + 2)
        y1 = ad.conv2d(x, w, stride=1, padding=1)
        y2 = ad.conv2d(x, w, stride=2, padding=1)
        return _weight_loss(y1, r) + _weight_loss(y2, r)

    return build, [("x", x), ("w", w)]


def _setup_max_pool(seed: int):
    rng = np.random.default_rng(seed)
    base = rng.permutation(32).astype(ad.default_dtype()).reshape(1, 2, 4, 4) * 0.2
    x = ad.parameter(base)
    return (lambda: _weight_loss(ad.max_pool2d(x, 2, 2), np.random.default_rng(seed + 2)),
            [("x", x)])


def _setup_bilinear(seed: int):
    rng = np.random.default_rng(seed)
    x = ad.parameter(_rand(rng, (1, 2, 4, 5)))

    def build():
        r = np.random.default_rng(seed + 2)
        return _weight_loss(ad.bilinear_resize(x, 7, 3), r) + _weight_loss(ad.bilinear_resize(x, 2, 10), r)

    return build, [("x", x)]


def _setup_linear(seed: int):
    rng = np.random.default_rng(seed)
    x = ad.parameter(_rand(rng, (3, 4)))
    w = ad.parameter(_rand(rng, (5, 4)) * 0.4)
    b = ad.parameter(_rand(rng, (5,)) * 0.1)
    return (lambda: _weight_loss(ad.linear(x, w, b), np.random.default_rng(seed + 2)),
            [("x", x), ("w", w), ("b", b)])


# -- composite blocks ------------------------------------------------------------

def _attention_parts(seed: int, n=3, c=8, heads=2):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(embed_dim=c, heads=heads, grid_n=n)
    p = ad.parameter(rng.normal(size=(n, n, c)).astype(ad.default_dtype()) * 0.5)
    return rng, cfg, p


def _setup_attention_dense(seed: int):
    rng, cfg, p = _attention_parts(seed)
    params = AttentionParams(cfg.embed_dim, rng)
    named = [("x", p)] + list(params.named_parameters())
    return (lambda: _weight_loss(dense_mhsa(p.reshape(cfg.grid_n**2, cfg.embed_dim), params, cfg.heads),
                                 np.random.default_rng(seed + 2)), named)


def _setup_attention_masked(seed: int):
    rng, cfg, p = _attention_parts(seed)
    params = AttentionParams(cfg.embed_dim, rng)
    mask = same_column_mask(cfg.grid_n, cfg.grid_n)
    named = [("x", p)] + list(params.named_parameters())
    return (lambda: _weight_loss(masked_mhsa(p.reshape(cfg.grid_n**2, cfg.embed_dim), mask, params, cfg),
                                 np.random.default_rng(seed + 2)), named)


def _setup_attention_column(seed: int):
    rng, cfg, p = _attention_parts(seed)
    params = AttentionParams(cfg.embed_dim, rng)
    pe = PositionalEmbeddings(cfg.grid_n, cfg.grid_n, cfg.embed_dim, rng)
    named = [("x", p)] + list(params.named_parameters()) + list(pe.named_parameters())
    return (lambda: _weight_loss(column_attention(p, pe, params, cfg), np.random.default_rng(seed + 2)),
            named)


def _setup_attention_row(seed: int):
    rng, cfg, p = _attention_parts(seed)
    params = AttentionParams(cfg.embed_dim, rng)
    pe = PositionalEmbeddings(cfg.grid_n, cfg.grid_n, cfg.embed_dim, rng)
    named = [("x", p)] + list(params.named_parameters()) + list(pe.named_parameters())
    return (lambda: _weight_loss(row_attention(p, pe, params, cfg), np.random.default_rng(seed + 2)),
            named)


def _setup_attention_twin(seed: int):
    rng, cfg, p = _attention_parts(seed)
    col = AttentionParams(cfg.embed_dim, rng)
    row = AttentionParams(cfg.embed_dim, rng)
    pe = PositionalEmbeddings(cfg.grid_n, cfg.grid_n, cfg.embed_dim, rng)
    named = ([("x", p)] + [(f"col.{n}", t) for n, t in col.named_parameters()]
             + [(f"row.{n}", t) for n, t in row.named_parameters()] + list(pe.named_parameters()))
    return (lambda: _weight_loss(twin_attention(p, pe, col, row, cfg), np.random.default_rng(seed + 2)),
            named)


def _layer_setup(layer_cls) -> Setup:
    def setup(seed: int):
        rng, cfg, p = _attention_parts(seed)
        layer = layer_cls(cfg, rng, mlp_ratio=2.0)
        pe = PositionalEmbeddings(cfg.grid_n, cfg.grid_n, cfg.embed_dim, rng)
        if layer_cls is OriginalLayer:
            def build():
                x = p.reshape(cfg.grid_n**2, cfg.embed_dim)
                return _weight_loss(layer(x), np.random.default_rng(seed + 2))
            named = [("x", p)] + list(layer.named_parameters())
        else:
            def build():
                return _weight_loss(layer(p, pe), np.random.default_rng(seed + 2))
            named = [("x", p)] + list(layer.named_parameters()) + list(pe.named_parameters())
        return build, named

    return setup


def _setup_backbone_fpn(seed: int):
    rng = np.random.default_rng(seed)
    backbone = Backbone(rng, channels=(8, 8, 8, 8))
    fpn = Fpn((8, 8, 8, 8), 8, rng)
    image = ad.parameter(rng.uniform(0, 1, size=(1, 3, 64, 64)).astype(ad.default_dtype()))

    def build():
        pyr = fpn(*backbone(image))
        r = np.random.default_rng(seed + 2)
        total = None
        for name in ("P2", "P5", "P6"):
            term = _weight_loss(pyr.levels[name], r)
            total = term if total is None else total + term
        return total

    named = [("image", image)] + list(backbone.named_parameters()) + list(fpn.named_parameters())
    return build, named


def _setup_mask_fusion(seed: int):
    rng = np.random.default_rng(seed)
    fusion = MaskFusion(4, 4, rng)
    # extents chosen so the coarsest level is 2x2: group stats stay non-degenerate
    p2 = ad.parameter(rng.normal(size=(4, 16, 16)).astype(ad.default_dtype()) * 0.5)
    p3 = ad.parameter(rng.normal(size=(4, 8, 8)).astype(ad.default_dtype()) * 0.5)
    p4 = ad.parameter(rng.normal(size=(4, 4, 4)).astype(ad.default_dtype()) * 0.5)
    p5 = ad.parameter(rng.normal(size=(4, 2, 2)).astype(ad.default_dtype()) * 0.5)
    named = ([("p2", p2), ("p3", p3), ("p4", p4), ("p5", p5)] + list(fusion.named_parameters()))
    return (lambda: _weight_loss(fusion(p2, p3, p4, p5), np.random.default_rng(seed + 2)), named)


def _setup_dynamic_convolve(seed: int):
    rng = np.random.default_rng(seed)
    feature = ad.parameter(rng.normal(size=(4, 6, 6)).astype(ad.default_dtype()) * 0.5)
    kernels = ad.parameter(rng.normal(size=(2, 2, 36)).astype(ad.default_dtype()) * 0.5)

    def build():
        logits = dynamic_convolve(feature, kernels, 3)
        return _weight_loss(ad.sigmoid(logits), np.random.default_rng(seed + 2))

    return build, [("feature", feature), ("kernels", kernels)]


def _setup_focal(seed: int):
    rng = np.random.default_rng(seed)
    logits = ad.parameter(rng.normal(size=(6, 3)).astype(ad.default_dtype()))
    targets = rng.integers(0, 4, size=6)
    return lambda: focal_loss(logits, targets), [("logits", logits)]


def _setup_dice(seed: int):
    rng = np.random.default_rng(seed)
    pred = ad.parameter(rng.uniform(0.1, 0.9, size=(8, 8)).astype(ad.default_dtype()))
    gt = (rng.random((8, 8)) < 0.4).astype(np.float64)
    return lambda: dice_loss(ad.sigmoid(pred * 3.0), gt), [("pred", pred)]


CHECKS: dict[str, CheckSpec] = {
    "add": CheckSpec(_binary_setup(lambda a, b: a + b)),
    "sub": CheckSpec(_binary_setup(lambda a, b: a - b)),
    "mul": CheckSpec(_binary_setup(lambda a, b: a * b)),
    # denominators of order one keep the difference-quotient truncation in tolerance
    "div": CheckSpec(_binary_setup(lambda a, b: a / b, low=1.2, high=2.0)),
    "power": CheckSpec(_unary_setup(lambda x: x**2.0, positive_only=True)),
    "exp": CheckSpec(_unary_setup(ad.texp)),
    "log": CheckSpec(_unary_setup(ad.tlog, low=1.0, high=2.5, positive_only=True)),
    "relu": CheckSpec(_unary_setup(ad.relu)),
    "leaky_relu": CheckSpec(_unary_setup(lambda x: ad.leaky_relu(x, 0.1))),
    "sigmoid": CheckSpec(_unary_setup(ad.sigmoid)),
    "softplus": CheckSpec(_unary_setup(ad.softplus)),
    "gelu": CheckSpec(_unary_setup(ad.gelu)),
    "matmul": CheckSpec(_setup_matmul),
    "matmul_batched": CheckSpec(_setup_batched_matmul),
    "softmax": CheckSpec(_setup_softmax),
    "reductions": CheckSpec(_setup_reductions),
    "max": CheckSpec(_setup_max),
    "shape_ops": CheckSpec(_setup_shape_ops),
    "masked_fill": CheckSpec(_setup_masked_fill),
    "linear": CheckSpec(_setup_linear),
    "layer_norm": CheckSpec(_setup_layer_norm),
    "group_norm": CheckSpec(_setup_group_norm),
    "conv2d": CheckSpec(_setup_conv2d),
    "max_pool2d": CheckSpec(_setup_max_pool),
    "bilinear_resize": CheckSpec(_setup_bilinear),
    "attention_dense": CheckSpec(_setup_attention_dense, composite=True),
    "attention_masked": CheckSpec(_setup_attention_masked, composite=True),
    "attention_column": CheckSpec(_setup_attention_column, composite=True),
    "attention_row": CheckSpec(_setup_attention_row, composite=True),
    "attention_twin": CheckSpec(_setup_attention_twin, composite=True),
    "layer_original": CheckSpec(_layer_setup(OriginalLayer), composite=True, max_entries=12),
    "layer_pure_twin": CheckSpec(_layer_setup(PureTwinLayer), composite=True, max_entries=12),
    "layer_hybrid_twin": CheckSpec(_layer_setup(HybridTwinLayer), composite=True, max_entries=12),
    "backbone_fpn": CheckSpec(_setup_backbone_fpn, composite=True, float32_ok=False, max_entries=4, step=1e-6),
    "mask_fusion": CheckSpec(_setup_mask_fusion, composite=True, float32_ok=False, max_entries=6, step=1e-6),
    "dynamic_convolve": CheckSpec(_setup_dynamic_convolve, composite=True, max_entries=24),
    "focal_loss": CheckSpec(_setup_focal, composite=True),
    "dice_loss": CheckSpec(_setup_dice, composite=True),
}


def run_check(name: str, seed: int = 0, dtype=np.float64) -> float:
    """Audit one registered check; returns the max relative error."""
    dtype = np.dtype(dtype).type
    spec = CHECKS[name]
    h = spec.step if spec.step is not None else (COMPOSITE_STEP[dtype] if spec.composite else OP_STEP)
    with ad.using_dtype(dtype):
        build, named = spec.setup(seed)
        for _, p in named:
            p.zero_grad()
        loss = build()
        loss.backward()
        analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                    for n, p in named}

    # difference quotients run in float64 on a twin with identical values
    with ad.using_dtype(np.float64):
        build_hi, named_hi = spec.setup(seed)
        for (_, lo), (_, hi) in zip(named, named_hi):
            hi.data = lo.data.astype(np.float64)
        rng = np.random.default_rng(seed + 1)
        worst = 0.0
        for (pname, p_lo), (_, p_hi) in zip(named, named_hi):
            size = p_hi.data.size
            if size > spec.max_entries:
                indices = rng.choice(size, size=spec.max_entries, replace=False)
            else:
                indices = np.arange(size)
            idx, numeric = numeric_grad(lambda: build_hi().item(), p_hi, indices, h_scale=h)
            err = relative_error(analytic[pname].reshape(-1)[idx], numeric)
            worst = max(worst, err)
    return worst


def run_gradcheck(only: list[str] | None = None, seed: int = 0, dtype=np.float64) -> dict[str, float]:
    """Run checks (all applicable when selector empty); max rel. error per name."""
    dtype = np.dtype(dtype).type
    if only:
        names = list(only)
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise UsageError(f"unknown gradcheck selector(s): {unknown}; known: {sorted(CHECKS)}")
    else:
        names = [n for n, spec in CHECKS.items() if spec.float32_ok or dtype is np.float64]
    return {name: run_check(name, seed, dtype) for name in names}


def tolerance_for(dtype) -> float:
    return TOLERANCES[np.dtype(dtype).type]
