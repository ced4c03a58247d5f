"""Dense float64 tensors and a reverse-mode gradient tape.

A :class:`Tape` is made active with ``with Tape() as tape:``. While active,
every primitive in :mod:`dalight3d.ops` whose inputs require gradients appends
a node (inputs, output, backward rule) to it. :func:`backward` then replays the
nodes in reverse recorded order. Outside an active tape nothing is recorded,
which is how inference runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

DTYPE = np.float64


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"every extent must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _not_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._leaves: dict[int, Tensor] = {}
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, name, inputs, output, backward_fn) -> None:
        if self.consumed:
            raise TapeError("tape already used for backward; clear() it first")
        for t in inputs:
            if t.requires_grad and id(t) not in self._outputs:
                self._leaves.setdefault(id(t), t)
        self._outputs.add(id(output))
        self.nodes.append(Node(tuple(inputs), output, backward_fn, name))

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def clear(self) -> None:
        """Drop recorded nodes and zero the grad slot of every leaf seen."""
        for t in self._leaves.values():
            t.zero_grad()
        self.nodes.clear()
        self._leaves.clear()
        self._outputs.clear()
        self.consumed = False


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(name: str, inputs: Iterable[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record it if any input needs a gradient."""
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{name}: non-finite output")
    inputs = tuple(inputs)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(name, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] = ()) -> None:
    """Populate ``grad`` on every leaf that influenced ``loss``.

    Leaves seen by the tape and any extra ``params`` start from zero, so a
    parameter off every path to the loss ends with an all-zero gradient.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward called twice on the same tape without clear()")
    for t in list(tape.leaves()) + list(params):
        if t.grad is None:
            t.zero_grad()
    leaf_ids = {id(t) for t in tape.leaves()}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in leaf_ids:
                t.grad += gi
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = np.array(gi, dtype=DTYPE, copy=True)
    tape.consumed = True
