"""Dense tensors recorded on a reverse-mode differentiation tape.

Operations executed while gradient recording is enabled append a node to the
current :class:`Tape`.  Replaying the tape backwards from a scalar loss
populates ``.grad`` on every reachable tensor that requires gradients.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _stack() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = [Tape()]
    return stack


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic; shapes must agree exactly, python scalars and plain arrays are constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_full(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_full(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def abs(self):
        return abs_(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager a tape becomes the recording target for the
    enclosed block; outside any ``with`` block a per-thread default tape is
    used.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))

    def clear(self) -> None:
        self.nodes = []

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not require grad; nothing was recorded")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        alive: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            out = node.output
            out.grad = g if out.grad is None else out.grad + g
            for t, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                    alive[key] = t
        # whatever is left never appeared as an op output: leaves
        for key, g in pending.items():
            t = alive[key]
            t.grad = g if t.grad is None else t.grad + g
        if not retain:
            self.clear()


def current_tape() -> Tape:
    return _stack()[-1]


def backward(loss: Tensor, retain: bool = False) -> None:
    current_tape().backward(loss, retain=retain)


def make(data: np.ndarray, inputs: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it if any input requires gradients."""
    inputs = tuple(inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        current_tape().record(inputs, out, backward_fn)
    return out


def _const(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=like.data.dtype)
    return Tensor(arr)


def _full(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=like.data.dtype), like.shape))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if b.size != 1 and a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_like(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def add(a, b) -> Tensor:
    b = _const(b, a)
    _check_same(a, b, "add")
    return make(a.data + b.data, (a, b), lambda g: (g, _reduce_like(g, b) if b.requires_grad else None))


def add_residual(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape feature maps (skip connection)."""
    if a.shape != b.shape:
        raise ValueError(f"residual sum needs identical shapes, got {a.shape} and {b.shape}")
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    b = _const(b, a)
    _check_same(a, b, "sub")
    return make(a.data - b.data, (a, b), lambda g: (g, _reduce_like(-g, b) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    b = _const(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * bd if a.requires_grad else None
        gb = _reduce_like(g * ad, b) if b.requires_grad else None
        return ga, gb

    return make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    b = _const(b, a)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return ga, (_reduce_like(-ga * out, b) if b.requires_grad else None)

    return make(out, (a, b), backward)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make(np.abs(a.data), (a,), lambda g: (g * sign,))


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, a.ndim)
    out = a.data.sum(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    shape = a.shape
    return make(np.asarray(out), (a,), lambda g: (np.broadcast_to(g.reshape(kept), shape),))


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))
