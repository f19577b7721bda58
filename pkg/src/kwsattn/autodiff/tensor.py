"""Tensor value type and the gradient tape that records operations on it."""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError

_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; kept minimal, the ops module is the real surface
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __mul__(self, other):
        from .ops import mul, scale
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)


class Node:
    __slots__ = ("output", "inputs", "backward", "op")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable, op: str):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager; ops executed inside it on tensors that require
    gradients are appended in execution order, which is a topological order
    by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable, op: str) -> None:
        self.nodes.append(Node(output, inputs, backward, op))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every recorded input.

        Each node is visited exactly once, newest first.
        """
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss or explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += ig


def record(output: Tensor, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Attach ``output`` to the active tape when any input needs a gradient."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(output, inputs, backward, op)
    return output


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
