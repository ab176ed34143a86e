"""Full model assembly: backbone -> pyramid -> per-level encoder -> heads,
plus the fused mask feature with optional encoder-derived level substitution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .attention import PositionalEmbeddings
from .autodiff import Tensor
from .backbone import LEVELS, Backbone, FeaturePyramid, Fpn
from .config import RunConfig
from .heads import ClassHead, KernelHead, patchify
from .layers import Encoder
from .maskgen import EncoderFeatureProjection, MaskFusion, substituted_level


@dataclass
class ModelOutputs:
    class_logits: dict[str, Tensor]  # per level [N, N, M]
    kernels: dict[str, Tensor]  # per level [N, N, D]
    mask_feature: Tensor  # [C_mask, H/4, W/4]
    encoded: dict[str, Tensor]  # per level [N, N, C]
    pyramid: FeaturePyramid


class SegmentationModel(nn.Module):
    """One parameter set covering the whole pipeline, deterministic given (cfg, seed)."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        spec = cfg.grid_spec()
        self.grid_spec = spec
        attn_cfg = cfg.attention_config()
        self.backbone = Backbone(rng, cfg.backbone_channels, dtype=dtype)
        self.fpn = Fpn(cfg.backbone_channels, cfg.fpn_channels, rng, dtype=dtype)
        self.patch_proj = nn.Linear(cfg.fpn_channels, cfg.embed_dim, rng, dtype=dtype)
        self.pos_embeddings = {
            level: PositionalEmbeddings(n, n, cfg.embed_dim, rng, dtype=dtype)
            for level, n in zip(LEVELS, spec.grid_sizes)
        }
        self.encoder = Encoder(cfg.layer_variant(), attn_cfg, rng, dtype=dtype)
        self.class_head = ClassHead(cfg.embed_dim, cfg.classes, rng, dtype=dtype)
        if cfg.kernels == "dynamic":
            self.kernel_head = KernelHead(cfg.embed_dim, spec.kernel_dim, rng, dtype=dtype)
            self.static_kernels = None
        else:
            self.kernel_head = None
            bound = 1.0 / float(np.sqrt(spec.kernel_dim))
            self.static_kernels = {
                level: ad.parameter(
                    rng.uniform(-bound, bound, size=(n, n, spec.kernel_dim)).astype(dtype or ad.default_dtype())
                )
                for level, n in zip(LEVELS, spec.grid_sizes)
            }
        self.fusion = MaskFusion(cfg.fpn_channels, cfg.mask_channels, rng, dtype=dtype)
        if cfg.substitute != "none":
            self.encoder_proj = EncoderFeatureProjection(cfg.embed_dim, cfg.fpn_channels, rng, dtype=dtype)
        else:
            self.encoder_proj = None

    def __call__(self, image: Tensor) -> ModelOutputs:
        if image.ndim == 3:
            image = image.reshape(1, *image.shape)
        c2, c3, c4, c5 = self.backbone(image)
        pyramid = self.fpn(c2, c3, c4, c5)
        encoded = {}
        for level, n in zip(LEVELS, self.grid_spec.grid_sizes):
            grid = patchify(pyramid.levels[level], n, self.patch_proj)
            encoded[level] = self.encoder(grid, self.pos_embeddings[level])
        class_logits = {level: self.class_head(encoded[level]) for level in LEVELS}
        if self.kernel_head is not None:
            kernels = {level: self.kernel_head(encoded[level]) for level in LEVELS}
        else:
            kernels = dict(self.static_kernels)
        p5_in = substituted_level(pyramid.levels["P5"], encoded["P5"], self.encoder_proj,
                                  self.cfg.substitute in ("p5", "p4p5"))
        p4_in = substituted_level(pyramid.levels["P4"], encoded["P4"], self.encoder_proj,
                                  self.cfg.substitute == "p4p5")
        mask_feature = self.fusion(pyramid.levels["P2"], pyramid.levels["P3"], p4_in, p5_in)
        return ModelOutputs(class_logits=class_logits, kernels=kernels, mask_feature=mask_feature,
                            encoded=encoded, pyramid=pyramid)
