"""Tensors and the recording tape.

Operations record onto the innermost active :class:`Tape` only when at least
one input requires a gradient, so inference outside a tape stores nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    output: Tensor
    inputs: tuple
    backward: Callable  # grad_out -> sequence of grads (None where not needed)


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations; ``backward`` replays it once in reverse."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self.visited = 0

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(Node(output, tuple(inputs), backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self.consumed:
            raise TapeError("backward() called twice on the same tape; run the forward pass again")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, np.float64)}
        produced = {id(n.output) for n in self.nodes}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            self.visited += 1
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes = []


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def op_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording ``backward`` if any input needs it."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out
