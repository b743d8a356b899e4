"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamWState:
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState,
               lr: float | None = None, decay_mask: Sequence[bool] | None = None) -> None:
    """One AdamW update in place.

    ``decay_mask[i]`` False exempts parameter ``i`` from weight decay (biases,
    norms, tokens).  ``lr`` overrides ``state.lr`` for scheduled training.
    """
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {p.name or i!r} at step {state.t + 1}")
        if state.m[i].shape != p.shape:
            raise ValueError(f"optimizer state shape {state.m[i].shape} != parameter {p.name!r} shape {p.shape}")

    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        wd = state.weight_decay if (decay_mask is None or decay_mask[i]) else 0.0
        if wd:
            p.data -= (lr * wd) * p.data
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= (lr * step).astype(p.data.dtype, copy=False)


def cosine_lr(step: int, base_lr: float, total_steps: int, warmup_steps: int = 0, min_lr: float = 0.0) -> float:
    """Learning rate at 0-based ``step``: linear warmup then half-cosine decay."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
