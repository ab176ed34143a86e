"""Momentum-SGD training loop over synthetic scenes, with JSONL metrics,
periodic checkpoints, NaN abort, and bit-exact resume."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import LEVELS
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, config_to_text
from .data import SceneSample, generate_dataset
from .errors import NonFiniteError, TrainingError, UsageError
from .losses import assign_targets, dice_loss, focal_loss, total_loss
from .maskgen import dynamic_convolve
from .pipeline import SegmentationModel

EVAL_SEED_OFFSET = 100_000


def train_dataset(cfg: RunConfig) -> list[SceneSample]:
    return generate_dataset(cfg.train_samples, cfg.image_h, cfg.image_w, cfg.max_objects,
                            cfg.classes, cfg.seed)


def eval_dataset(cfg: RunConfig) -> list[SceneSample]:
    return generate_dataset(cfg.eval_samples, cfg.image_h, cfg.image_w, cfg.max_objects,
                            cfg.classes, cfg.seed + EVAL_SEED_OFFSET)


class SgdMomentum:
    """v = mu * v + (g + wd * p); p -= lr * v."""

    def __init__(self, params: dict[str, Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def clip_gradients(self, max_norm: float) -> float:
        """Scale all gradients so their global norm is at most max_norm."""
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= p.dtype.type(scale)
        return norm

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {f"momentum/{name}": v for name, v in self.velocity.items()}

    def load_state(self, tensors: dict[str, np.ndarray]):
        for name in self.velocity:
            key = f"momentum/{name}"
            if key not in tensors:
                raise UsageError(f"checkpoint is missing momentum buffer {key}")
            self.velocity[name] = tensors[key].astype(self.velocity[name].dtype, copy=True)


def sample_losses(model: SegmentationModel, sample: SceneSample, cfg: RunConfig) -> tuple[Tensor, Tensor, Tensor | None]:
    """(total, classification, mean dice or None) for one scene."""
    spec = model.grid_spec
    outputs = model(Tensor(sample.image))
    targets = assign_targets(sample.instances(), spec, cfg.assignment_config(),
                             cfg.image_h, cfg.image_w)

    logit_rows, target_rows = [], []
    kernel_rows, gt_indices = [], []
    for level, n, tgt in zip(LEVELS, spec.grid_sizes, targets):
        logit_rows.append(outputs.class_logits[level].reshape(n * n, spec.classes))
        target_rows.append(tgt.class_targets.reshape(-1))
        pos = np.nonzero(tgt.instance_index.reshape(-1) >= 0)[0]
        if pos.size:
            kernels = outputs.kernels[level].reshape(n * n, spec.kernel_dim)
            kernel_rows.append(ad.take(kernels, pos, axis=0))
            gt_indices.extend(tgt.instance_index.reshape(-1)[pos].tolist())

    cls = focal_loss(ad.concat(logit_rows, axis=0), np.concatenate(target_rows),
                     alpha=cfg.focal_alpha, gamma=cfg.focal_gamma)

    dice_vec = None
    if kernel_rows:
        selected = ad.concat(kernel_rows, axis=0) if len(kernel_rows) > 1 else kernel_rows[0]
        logits = dynamic_convolve(outputs.mask_feature, selected, spec.kernel_size)
        soft = ad.sigmoid(logits)
        soft = ad.bilinear_resize(soft.reshape(soft.shape[0], 1, *soft.shape[1:]),
                                  cfg.image_h, cfg.image_w)
        soft = soft.reshape(soft.shape[0], cfg.image_h, cfg.image_w)
        gt = sample.masks[np.asarray(gt_indices, dtype=np.int64)]
        dice_vec = dice_loss(soft, gt)

    return total_loss(cls, dice_vec, cfg.lambda_mask), cls, dice_vec


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    first_loss: float
    final_loss: float
    iterations_run: int
    aborted: bool = False


def _checkpoint_state(model, optimizer, order_rng, iteration, cfg) -> tuple[dict, dict]:
    tensors = {f"param/{name}": p.data.copy() for name, p in model.param_dict().items()}
    tensors.update(optimizer.state_tensors())
    meta = {
        "iteration": iteration,
        "order_rng_state": order_rng.bit_generator.state,
        "config": config_to_text(cfg),
    }
    return meta, tensors


def _restore(model, optimizer, order_rng, path: str, cfg: RunConfig) -> int:
    cfg_hash, meta, tensors = load_checkpoint(path)
    if cfg_hash != config_hash(cfg):
        raise UsageError("checkpoint was produced with a different configuration")
    model.load_param_data({name[len("param/"):]: arr for name, arr in tensors.items()
                           if name.startswith("param/")})
    optimizer.load_state(tensors)
    order_rng.bit_generator.state = meta["order_rng_state"]
    return int(meta["iteration"])


def train(cfg: RunConfig, workdir: str, resume: str | None = None,
          log_every: int = 1) -> TrainResult:
    os.makedirs(workdir, exist_ok=True)
    ckpt_path = os.path.join(workdir, "checkpoint.bin")
    log_path = os.path.join(workdir, "train_log.jsonl")

    dataset = train_dataset(cfg)
    model = SegmentationModel(cfg, np.random.default_rng(cfg.seed))
    optimizer = SgdMomentum(model.param_dict(), cfg.momentum, cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed + 1)

    start_iteration = 0
    mode = "w"
    if resume is not None:
        start_iteration = _restore(model, optimizer, order_rng, resume, cfg)
        mode = "a"

    cfg_hash = config_hash(cfg)
    first_loss = None
    final_loss = float("nan")
    aborted = False
    last_saved = start_iteration if resume is not None else None
    iteration = start_iteration

    with open(log_path, mode, encoding="utf-8") as log:
        for iteration in range(start_iteration + 1, cfg.iterations + 1):
            idxs = order_rng.integers(0, len(dataset), size=cfg.batch_size)
            try:
                per_sample = [sample_losses(model, dataset[i], cfg) for i in idxs]
                batch_total = per_sample[0][0]
                for t, _, _ in per_sample[1:]:
                    batch_total = batch_total + t
                batch_total = batch_total * (1.0 / len(per_sample))
                loss_val = batch_total.item()
                if not np.isfinite(loss_val):
                    raise TrainingError(f"non-finite loss at iteration {iteration}")
                batch_total.backward()
            except (TrainingError, NonFiniteError) as err:
                aborted = True
                log.write(json.dumps({"iteration": iteration, "error": str(err),
                                      "last_checkpoint": last_saved}) + "\n")
                break

            grad_norm = optimizer.clip_gradients(cfg.grad_clip)
            lr = cfg.learning_rate * min(1.0, iteration / max(1, cfg.warmup_iterations))
            optimizer.step(lr)
            model.zero_grad()

            cls_val = float(np.mean([c.item() for _, c, _ in per_sample]))
            dice_vals = [float(d.data.mean()) for _, _, d in per_sample if d is not None]
            if first_loss is None:
                first_loss = loss_val
            final_loss = loss_val
            if iteration % log_every == 0 or iteration == cfg.iterations:
                log.write(json.dumps({
                    "iteration": iteration,
                    "loss": loss_val,
                    "cls_loss": cls_val,
                    "dice_loss": float(np.mean(dice_vals)) if dice_vals else 0.0,
                    "lr": lr,
                    "grad_norm": grad_norm,
                }) + "\n")

            if iteration % cfg.checkpoint_interval == 0 or iteration == cfg.iterations:
                meta, tensors = _checkpoint_state(model, optimizer, order_rng, iteration, cfg)
                save_checkpoint(ckpt_path, cfg_hash, meta, tensors)
                last_saved = iteration

    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                       first_loss=first_loss if first_loss is not None else float("nan"),
                       final_loss=final_loss, iterations_run=(iteration if not aborted else iteration - 1),
                       aborted=aborted)


def load_model(checkpoint_path: str, cfg: RunConfig | None = None) -> tuple[SegmentationModel, RunConfig, dict]:
    """Rebuild a model from a checkpoint; config defaults to the embedded one."""
    from .config import parse_config

    cfg_hash, meta, tensors = load_checkpoint(checkpoint_path)
    if cfg is None:
        cfg = parse_config(meta["config"])
    if cfg_hash != config_hash(cfg):
        raise UsageError("checkpoint was produced with a different configuration")
    model = SegmentationModel(cfg, np.random.default_rng(cfg.seed))
    model.load_param_data({name[len("param/"):]: arr for name, arr in tensors.items()
                           if name.startswith("param/")})
    return model, cfg, meta
