"""AdamW with decoupled weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError


def cosine_lr(t: float, t_max: float, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= t <= t_max:
        raise ValueError(f"step {t} outside [0, {t_max}]")
    if t == 0:
        return lr_max
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / t_max)) / 2.0


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr_max: float = 5e-5
    lr_min: float = 0.0
    t_max: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in
                ("step", "lr_max", "lr_min", "t_max", "beta1", "beta2", "weight_decay", "eps")}


def adamw_step(params, grads, state: OptimState, lr: float) -> None:
    """One in-place AdamW update.

    The decay ``theta *= 1 - lr * wd`` is applied before, and separately from,
    the bias-corrected moment step. Non-finite gradients reject the whole step.
    """
    grads = list(grads)
    for g in grads:
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient at optimizer step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    decay = 1.0 - lr * state.weight_decay
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
