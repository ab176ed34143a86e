"""Parameter containers and small reusable network pieces."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


class Module:
    """Lightweight parameter container; children discovered via attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            yield from _walk(name, value)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_dict(self) -> dict[str, Tensor]:
        out = {}
        for name, t in self.named_parameters():
            if name in out:
                raise ConfigError(f"duplicate parameter name {name}")
            out[name] = t
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def load_param_data(self, arrays: dict[str, np.ndarray]):
        params = self.param_dict()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, p in params.items():
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def _walk(name, value):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)
    elif isinstance(value, dict):
        for k, item in value.items():
            yield from _walk(f"{name}.{k}", item)


# -- initializers --------------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = float(np.sqrt(6.0 / fan_in))
    return ad.parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return ad.parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


def zeros_param(shape, dtype) -> Tensor:
    return ad.parameter(np.zeros(shape, dtype=dtype))


def ones_param(shape, dtype) -> Tensor:
    return ad.parameter(np.ones(shape, dtype=dtype))


# -- layers ----------------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=None,
                 bias_value: float = 0.0, weight_std: float | None = None):
        dtype = dtype or ad.default_dtype()
        if weight_std is None:
            self.weight = xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype)
        else:
            self.weight = ad.parameter((rng.normal(0.0, weight_std, size=(out_dim, in_dim))).astype(dtype))
        self.bias = ad.parameter(np.full(out_dim, bias_value, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=None):
        dtype = dtype or ad.default_dtype()
        fan_in = in_ch * kernel * kernel
        self.weight = kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype)
        self.bias = zeros_param((out_ch,), dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, dtype=None, eps: float = 1e-5):
        dtype = dtype or ad.default_dtype()
        if channels % groups != 0:
            raise ConfigError(f"group norm: {channels} channels not divisible by {groups} groups")
        self.gain = ones_param((channels,), dtype)
        self.bias = zeros_param((channels,), dtype)
        self.groups = groups
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.groups, self.gain, self.bias, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=None, eps: float = 1e-5):
        dtype = dtype or ad.default_dtype()
        self.gain = ones_param((dim,), dtype)
        self.bias = zeros_param((dim,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, axis=-1, eps=self.eps)


class ConvNormAct(Module):
    """conv3x3 -> group norm -> ReLU, the building block of backbone and fusion."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 stride: int = 1, groups: int = 8, dtype=None, norm: bool = True):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1, dtype=dtype)
        self.norm = GroupNorm(out_ch, min(groups, out_ch), dtype=dtype) if norm else None

    def __call__(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return ad.relu(x)
