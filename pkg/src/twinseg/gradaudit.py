"""Central finite-difference gradient auditing.

The numeric side stays independent of the tape: it only re-runs forward
passes under ``no_grad`` with perturbed parameter entries.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# step h = H_SCALE * max(1, |x|) per element
H_SCALE = 1e-3


def numeric_grad(loss_fn: Callable[[], float], param: Tensor, indices: Sequence[int] | None = None,
                 h_scale: float = H_SCALE) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of loss_fn w.r.t. selected flat indices of param.

    Returns (indices, gradient values at those indices).
    """
    flat = param.data.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    else:
        indices = np.asarray(indices, dtype=np.int64)
    grads = np.zeros(len(indices), dtype=np.float64)
    with ad.no_grad():
        for pos, i in enumerate(indices):
            orig = flat[i]
            h = h_scale * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            grads[pos] = (fp - fm) / (2.0 * h)
    return indices, grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over elements of |a-n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def audit(build_loss: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
          max_entries: int = 32, rng: np.random.Generator | None = None,
          h_scale: float = H_SCALE) -> dict[str, float]:
    """Compare tape gradients of build_loss() against finite differences.

    Returns max relative error per parameter name. ``build_loss`` must
    recompute the forward pass from the parameters' current data.
    """
    rng = rng or np.random.default_rng(0)
    for _, p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}

    def loss_value() -> float:
        return build_loss().item()

    report = {}
    for name, p in params:
        flat_size = p.data.size
        if flat_size > max_entries:
            indices = rng.choice(flat_size, size=max_entries, replace=False)
        else:
            indices = None
        idx, numeric = numeric_grad(loss_value, p, indices, h_scale=h_scale)
        report[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return report
