"""Run configuration: a flat key = value text format, validated on load.

Schema (all keys optional; defaults shown by ``default_config_text``):

    config_version      format version, currently 1
    seed                master seed for init, data and sample order
    image_h, image_w    input extent, multiples of 64
    classes             category count (the shape generator defines 3)
    train_samples, eval_samples, max_objects
    variant             original | pure_twin | hybrid_twin
    depth               encoder layer count K
    embed_dim, heads, mlp_ratio, dropout, post_norm
    grid_sizes          cells per side for P2..P6, comma separated
    backbone_channels   four stage widths
    fpn_channels        common pyramid width
    mask_channels       unified mask feature width
    kernel_size         dynamic kernel spatial extent (kernel dim = size^2 * mask_channels)
    substitute          none | p5 | p4p5 (encoder features replacing pyramid levels)
    kernels             dynamic | static
    scale_ranges        per-level sqrt-area ranges "lo:hi,..."
    center_fraction     positive-region fraction of the object box
    focal_alpha, focal_gamma, lambda_mask, score_threshold
    nms_kernel, nms_sigma, post_nms_score, max_instances
    iterations, batch_size, learning_rate, momentum, weight_decay,
    warmup_iterations, grad_clip (global-norm cap, 0 disables),
    checkpoint_interval
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .attention import AttentionConfig
from .errors import ConfigError
from .heads import GridSpec
from .layers import LayerVariant
from .losses import AssignmentConfig, NmsConfig

CONFIG_VERSION = 1

SUBSTITUTE_CHOICES = ("none", "p5", "p4p5")
KERNEL_CHOICES = ("dynamic", "static")


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    image_h: int = 128
    image_w: int = 128
    classes: int = 3
    train_samples: int = 300
    eval_samples: int = 60
    max_objects: int = 3
    variant: str = "hybrid_twin"
    depth: int = 2
    embed_dim: int = 64
    heads: int = 2
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    post_norm: bool = False
    grid_sizes: tuple[int, ...] = (12, 10, 8, 6, 4)
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    fpn_channels: int = 32
    mask_channels: int = 32
    kernel_size: int = 1
    substitute: str = "p5"
    kernels: str = "dynamic"
    scale_ranges: tuple[tuple[float, float], ...] = ((1, 16), (8, 32), (16, 64), (32, 128), (64, 256))
    center_fraction: float = 0.2
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    lambda_mask: float = 3.0
    score_threshold: float = 0.1
    nms_kernel: str = "gaussian"
    nms_sigma: float = 2.0
    post_nms_score: float = 0.3
    max_instances: int = 100
    iterations: int = 1500
    batch_size: int = 2
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iterations: int = 100
    grad_clip: float = 20.0
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        if self.image_h % 64 or self.image_w % 64:
            raise ConfigError("image extents must be multiples of 64")
        if self.variant not in ("original", "pure_twin", "hybrid_twin"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.substitute not in SUBSTITUTE_CHOICES:
            raise ConfigError(f"substitute must be one of {SUBSTITUTE_CHOICES}")
        if self.kernels not in KERNEL_CHOICES:
            raise ConfigError(f"kernels must be one of {KERNEL_CHOICES}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if len(self.backbone_channels) != 4:
            raise ConfigError("backbone_channels needs four entries")
        # constructing the sub-configs runs their invariant checks
        self.grid_spec()
        self.attention_config()
        self.layer_variant()
        self.assignment_config()
        self.nms_config()

    # -- derived views -------------------------------------------------------
    def grid_spec(self) -> GridSpec:
        return GridSpec(grid_sizes=tuple(self.grid_sizes), classes=self.classes,
                        mask_channels=self.mask_channels, kernel_size=self.kernel_size)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(embed_dim=self.embed_dim, heads=self.heads,
                               grid_n=max(self.grid_sizes), dropout=self.dropout)

    def layer_variant(self) -> LayerVariant:
        return LayerVariant(kind=self.variant, depth=self.depth, mlp_ratio=self.mlp_ratio,
                            post_norm=self.post_norm)

    def assignment_config(self) -> AssignmentConfig:
        return AssignmentConfig(scale_ranges=tuple(tuple(r) for r in self.scale_ranges),
                                center_fraction=self.center_fraction)

    def nms_config(self) -> NmsConfig:
        return NmsConfig(kernel=self.nms_kernel, sigma=self.nms_sigma,
                         post_nms_score=self.post_nms_score, max_instances=self.max_instances)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{_num(lo)}:{_num(hi)}" for lo, hi in value)
        return ",".join(_num(v) for v in value)
    if isinstance(value, float):
        return _num(value)
    return str(value)


def _num(v) -> str:
    f = float(v)
    return str(int(f)) if f == int(f) else repr(f)


def _parse_value(raw: str, name: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if name == "scale_ranges":
            pairs = []
            for chunk in raw.split(","):
                lo, hi = chunk.split(":")
                pairs.append((float(lo), float(hi)))
            return tuple(pairs)
        # remaining tuples are integer lists
        return tuple(int(v) for v in raw.split(","))
    except (ValueError, TypeError):
        raise ConfigError(f"bad value {raw!r} for config key {name}") from None


_FIELD_KINDS = {}
for f in fields(RunConfig):
    if f.type in ("int", "float", "str", "bool"):
        _FIELD_KINDS[f.name] = {"int": int, "float": float, "str": str, "bool": bool}[f.type]
    else:
        _FIELD_KINDS[f.name] = tuple


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_KINDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(raw, key, _FIELD_KINDS[key])
    return RunConfig(**values)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_to_text(cfg: RunConfig) -> str:
    """Canonical serialization: field order, one key per line."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> bytes:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).digest()


def default_config_text() -> str:
    return config_to_text(RunConfig())
