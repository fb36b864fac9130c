"""Dense tensor with tape-based reverse-mode differentiation.

A :class:`Tape` is the grad-mode switch: ops executed while a tape is active
(``with Tape(params) as tape:``) are recorded in execution order, and
:func:`backward` replays them in reverse.  Outside a tape, ops are plain
numpy evaluations.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives non-conformant shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """Raised when an op input lies outside the op's mathematical domain."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf value was produced.  ``op`` names the first offending op."""

    def __init__(self, op: str, index: int | None = None, message: str | None = None):
        self.op = op
        self.index = index
        where = f" (tape position {index})" if index is not None else ""
        super().__init__(message or f"non-finite value produced by op '{op}'{where}")


class Tensor:
    """n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            keep = isinstance(data, np.ndarray) and data.dtype == np.float32
            dtype = np.float32 if keep else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(as_tensor(other)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(as_tensor(other), ops.neg(self))

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis=axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis=axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed ops plus the parameter registry."""

    params: list[Tensor] = field(default_factory=list)
    nodes: list[Node] = field(default_factory=list)
    first_nonfinite: tuple[str, int] | None = None

    def __post_init__(self):
        self.params = list(self.params)
        for p in self.params:
            p.requires_grad = True

    def register(self, *params: Tensor) -> None:
        for p in params:
            p.requires_grad = True
            self.params.append(p)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        if self.first_nonfinite is None and not np.isfinite(output.data).all():
            self.first_nonfinite = (op, len(self.nodes))
        if output.requires_grad:
            self.nodes.append(Node(op, inputs, output, backward_fn))

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_state = _TapeState()


def active_tape() -> Tape | None:
    return _state.stack[-1] if _state.stack else None


def emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap an op result, record it on the active tape, enforce finiteness."""
    tape = active_tape()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    if tape is None:
        if not np.isfinite(out_data).all():
            raise NonFiniteError(op)
    else:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep over ``tape``; returns gradients for every registered parameter.

    Parameters the loss does not depend on receive a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    if not np.isfinite(loss.data).all():
        op, idx = tape.first_nonfinite or ("<input>", None)
        raise NonFiniteError(op, idx, f"loss is non-finite; first non-finite value from op '{op}'"
                             + (f" at tape position {idx}" if idx is not None else ""))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out: dict[Tensor, np.ndarray] = {}
    for p in tape.params:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
    return out

