"""Dense float64 tensors and the tape that records differentiable ops."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Arithmetic operators dispatch to :mod:`occforge.autodiff.ops`, so
    expressions like ``(a * b).sum()`` are recorded on the active tape.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar; imported lazily to avoid a cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops.

    Used as a context manager; while active, every op whose inputs require
    gradients appends a :class:`Record`. Tapes are thread-local, so separate
    threads can each run their own.
    """

    def __init__(self):
        self.records: list[Record] = []

    def record(self, op, inputs, output, backward) -> None:
        self.records.append(Record(op, tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        assert stack and stack[-1] is self
        stack.pop()


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording: ops run untracked inside this block."""

    def __enter__(self):
        stack = _stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        stack = _stack()
        stack.clear()
        stack.extend(self._saved)


def backward(output: Tensor, tape: Tape) -> None:
    """Reverse-mode sweep over ``tape`` seeded with d(output)/d(output) = 1.

    Sets ``.grad`` on every requires_grad tensor reachable from ``output``.
    """
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    touched: dict[int, Tensor] = {id(output): output}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        for inp, ig in zip(rec.inputs, rec.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                touched[key] = inp
    for key, t in touched.items():
        if t.requires_grad or t is output:
            t.grad = grads[key]
