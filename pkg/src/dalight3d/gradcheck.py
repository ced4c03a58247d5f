"""Central finite-difference checking of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError
from .tensor import Tape, Tensor, backward


def analytic_grads(closure: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = closure()
    backward(loss, tape, params=inputs)
    return [t.grad.copy() for t in inputs]


def numeric_grads(closure: Callable[[], Tensor], inputs: Sequence[Tensor], step: float) -> list[np.ndarray]:
    """Fourth-order central differences, ``h = step * max(1, |x|)``.

    ``(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`` has truncation error
    of order ``h^4``, so a step large enough to keep rounding noise far below
    the ``1e-8`` floor still resolves near-zero derivatives.
    """
    out = []
    for t in inputs:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            vals = []
            for k in (1, -1, 2, -2):
                flat[i] = orig + k * h
                vals.append(closure().item())
            flat[i] = orig
            if not np.all(np.isfinite(vals)):
                raise NonFiniteError("grad_check: non-finite closure value")
            g[i] = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h)
        out.append(g.reshape(t.shape))
    return out


def grad_check(closure: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3) -> float:
    """Max relative error between tape and central-difference gradients.

    The relative error of one element is
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``step`` is scaled by ``max(1, |x|)``.
    """
    analytic = analytic_grads(closure, inputs)
    numeric = numeric_grads(closure, inputs, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
