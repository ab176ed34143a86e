"""Minimal n-dimensional tensor with reverse-mode differentiation.

Values are numpy arrays (row-major, float32 by default, float64 for audit
runs). Every differentiable operation records the node on a per-thread tape;
``backward`` on a scalar replays the tape in reverse execution order and
accumulates gradients into every tensor that requires them.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NonFiniteError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = None
        _state.grad_enabled = True
        _state.default_dtype = np.float32
        _state.finite_checks = True
    return _state


def default_dtype():
    return _tls().default_dtype


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise UsageError(f"default dtype must be float32 or float64, got {dtype}")
    _tls().default_dtype = dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default floating dtype (e.g. for audits)."""
    st = _tls()
    prev = st.default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        st.default_dtype = prev


def set_finite_checks(enabled: bool):
    _tls().finite_checks = bool(enabled)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    st = _tls()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Tape:
    """Ordered record of executed operations for one backward replay."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def record(self, node: "Tensor"):
        self.nodes.append(node)

    def run_backward(self, loss: "Tensor"):
        if self.consumed:
            raise UsageError("backward already ran on this tape; start a new forward pass first")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
                if not node._retain_grad:
                    node.grad = None  # free intermediate grads early


def _active_tape() -> Tape:
    st = _tls()
    if st.tape is None or st.tape.consumed:
        st.tape = Tape()
    return st.tape


class Tensor:
    """A numpy-backed value that can participate in gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_tape", "_retain_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(default_dtype())
        # ascontiguousarray would promote 0-d scalars to 1-d; keep rank intact
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._tape: Tape | None = None
        self._retain_grad = True

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Populate ``grad`` on every requires_grad tensor feeding this scalar."""
        if self._tape is None:
            if not self.requires_grad:
                raise UsageError("backward on a tensor with no recorded operations and no requires_grad")
            if self.data.size != 1:
                raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
            self.grad = np.ones_like(self.data)
            return
        self._tape.run_backward(self)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that accumulates gradients across backward passes."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(out_data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result, checking finiteness and recording on the tape."""
    if _tls().finite_checks and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("forward operation produced NaN or Inf")
    out = Tensor(out_data)
    if _tls().grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        out._retain_grad = False
        tape = _active_tape()
        tape.record(out)
        out._tape = tape
    return out


def retain_grad(t: Tensor) -> Tensor:
    """Keep the gradient of an intermediate node after backward."""
    t._retain_grad = True
    return t


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# -- elementwise arithmetic --------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "div")
    try:
        out = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(out, (a,), backward)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _node(out, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _node(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _node(out, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(a.data >= 0, a.dtype.type(1), a.dtype.type(slope))
    out = a.data * factor

    def backward(g):
        _accum(a, g * factor)

    return _node(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)

    def backward(g):
        pos = x >= 0
        s = np.empty_like(x)
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        _accum(a, g * s)

    return _node(out, (a,), backward)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accum(a, (g * (cdf + x * pdf)).astype(x.dtype))

    return _node(out, (a,), backward)


# -- shape manipulation ------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _node(out, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _node(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            _accum(t, g[tuple(idx)])
            offset += s

    return _node(out, tuple(tensors), backward)


def tslice(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return _node(out, (a,), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        _accum(a, full)

    return _node(out, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (no grad there)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.dtype.type(value), a.data)

    def backward(g):
        _accum(a, np.where(mask, 0, g))

    return _node(out, (a,), backward)


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _node(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))
    if count == 0:
        raise DimensionError("mean over zero elements")
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=True))

    return _node(out, (a,), backward)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient flows to the first maximal element."""
    axis = axis % a.ndim
    out = a.data.max(axis=axis, keepdims=keepdims)
    idx = a.data.argmax(axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        _accum(a, full)

    return _node(out, (a,), backward)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents disagree for {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch extents do not broadcast for {a.shape} x {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _node(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ weight.T + bias, weight is [out, in]."""
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _node(out, (a,), backward)


# -- normalizations (composed from primitives; differentiable end to end) -----

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise DimensionError("layer_norm over a zero-length axis")
    if gain.shape[-1] != x.shape[axis] or bias.shape[-1] != x.shape[axis]:
        raise DimensionError(
            f"layer_norm: gain/bias extents {gain.shape}/{bias.shape} do not match axis extent {x.shape[axis]}"
        )
    mu = tmean(x, axis=axis, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    inv = power(add(var, _wrap(eps, x.dtype)), -0.5)
    normed = mul(centered, inv)
    return add(mul(normed, gain), bias)


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize [N, C, H, W] per sample over channel groups, then affine per channel."""
    from .errors import ConfigError

    if x.ndim != 4:
        raise DimensionError(f"group_norm expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = reshape(x, (n, groups, c // groups, h, w))
    mu = tmean(xg, axis=(2, 3, 4), keepdims=True)
    centered = sub(xg, mu)
    var = tmean(mul(centered, centered), axis=(2, 3, 4), keepdims=True)
    inv = power(add(var, _wrap(eps, x.dtype)), -0.5)
    normed = reshape(mul(centered, inv), (n, c, h, w))
    return add(mul(normed, reshape(gain, (1, c, 1, 1))), reshape(bias, (1, c, 1, 1)))


# -- spatial ops ---------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N, Cin, H, W] with [Cout, Cin, kh, kw]."""
    _check_same_dtype(x, w, "conv2d")
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0 or h + 2 * padding < kh or wdt + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h + 2 * padding}x{wdt + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N, Cin, oh, ow, kh, kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            # one matmul back to column space, then strided scatter-add per tap
            gcols = (gmat @ wmat).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, cin, h + 2 * padding, wdt + 2 * padding), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[..., i, j]
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accum(x, gxp)

    return _node(np.ascontiguousarray(out), (x, w), backward)


def max_pool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    if stride is None:
        stride = size
    if size != stride:
        raise DimensionError("max_pool2d supports size == stride only")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial extent {h}x{w} not divisible by {size}")
    oh, ow = h // size, w // size
    windows = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accum(x, gx)

    return _node(out, (x,), backward)


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Row-stochastic 1-d bilinear sampling matrix (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    scale = n_in / n_out
    for o in range(n_out):
        s = (o + 0.5) * scale - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        m[o, i0] += 1.0 - f
        m[o, i1] += f
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resampling of [N, C, H, W] (align_corners=False)."""
    if x.ndim != 4:
        raise DimensionError(f"bilinear_resize expects [N, C, H, W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize target extents must be >= 1")
    n, c, h, w = x.shape
    my = _interp_matrix(h, out_h, x.dtype.name)
    mx = _interp_matrix(w, out_w, x.dtype.name)
    out = np.matmul(my, np.matmul(x.data, mx.T))

    def backward(g):
        _accum(x, np.matmul(my.T, np.matmul(g, mx)))

    return _node(np.ascontiguousarray(out), (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, Tensor(keep))
