"""AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

NO_DECAY_NAMES = frozenset({"cls_token", "clr_token", "pos_embed"})


@dataclass(frozen=True)
class AdamWHyper:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05


def decays(name: str, shape: tuple[int, ...]) -> bool:
    """Weight decay applies to matrices/kernels only.

    Biases and norm scales (rank <= 1) and the learnable tokens and positional
    table are exempt.
    """
    return len(shape) > 1 and name not in NO_DECAY_NAMES


def adamw_step(
    params: dict,
    grads: dict[str, np.ndarray],
    state: dict[str, tuple[np.ndarray, np.ndarray]],
    hyper: AdamWHyper,
    step_index: int,
) -> bool:
    """One in-place AdamW update; returns False (and changes nothing) on non-finite grads.

    ``params`` maps names to objects with a ``.data`` array; ``state`` maps
    names to first/second moment arrays and is created on demand.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            log.warning("step %d: non-finite gradient in %s, skipping update", step_index, name)
            return False
    b1, b2 = hyper.betas
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for name, prm in params.items():
        g = grads.get(name)
        if g is None:
            continue
        theta = prm.data
        if g.shape != theta.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {theta.shape}")
        m, v = state.get(name, (np.zeros_like(theta), np.zeros_like(theta)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state[name] = (m.astype(theta.dtype, copy=False), v.astype(theta.dtype, copy=False))
        if hyper.weight_decay and decays(name, theta.shape):
            theta = theta * (1.0 - hyper.lr * hyper.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        prm.data = (theta - hyper.lr * update).astype(prm.data.dtype, copy=False)
    return True


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``; ``step`` is 0-based."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    t = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))
