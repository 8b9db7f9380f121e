"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tape records every differentiable op executed while it is active (entered
as a context manager). backward() replays the records in exact reverse
execution order, accumulating gradients on every tensor that requires them.
One backward pass per tape; a consumed tape refuses a second. With no active
tape, ops run plain numpy forward math and record nothing, which is the
evaluation mode used for inference.

Tensors are confined to the tape that was active when they were created;
mixing tensors across live tapes raises. Leaf tensors (parameters, inputs)
belong to no tape and may be reused freely.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from . import backend

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; supports exactly one backward pass."""

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def _record(self, out: "Tensor", backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward_fn))

    def backward(self, root: "Tensor") -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
        if root.tape is not self:
            raise RuntimeError("backward root does not belong to this tape")
        self._consumed = True
        root.grad = np.ones_like(root.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: Optional[Tape] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else tensor(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else tensor(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, float(other))

    def __rmul__(self, other):
        return smul(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Leaf tensor; belongs to no tape and survives across tapes."""
    return Tensor(data, requires_grad=requires_grad)


def _check_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = active_tape()
    for t in inputs:
        if t.tape is not None and t.tape is not tape:
            raise RuntimeError("tensor belongs to a different tape; no cross-tape reuse")
    return tape


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _make(inputs: Sequence[Tensor], data: np.ndarray,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = _check_tape(inputs)
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, tape=tape if track else None)
    if track:
        tape._record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---- arithmetic ----

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return _make([a, b], a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))
    return _make([a, b], a.data - b.data, bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)
    return _make([a], -a.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return _make([a, b], a.data * b.data, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _make([a, b], a.data / b.data, bwd)


def smul(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accum(a, g * c)
    return _make([a], a.data * c, bwd)


def sadd(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accum(a, g)
    return _make([a], a.data + c, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D @ 2D or batched 3D @ 3D with identical leading dimension."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ValueError(f"matmul expects matching 2D or 3D operands, got "
                         f"{a.data.shape} @ {b.data.shape}")

    def bwd(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)
    return _make([a, b], a.data @ b.data, bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, g.transpose(inv))
    return _make([a], a.data.transpose(axes), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(old))
    return _make([a], a.data.reshape(shape), bwd)


# ---- structure: token-axis slice/concat, lookups ----

def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])
    return _make(list(parts), np.concatenate([p.data for p in parts], axis=axis), bwd)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)
    return _make([a], a.data[idx].copy(), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Rows of a 2D table; used for categorical embedding lookup."""
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)
    return _make([a], a.data[idx].copy(), bwd)


def element(a: Tensor, index: tuple) -> Tensor:
    """Single element as a scalar tensor."""
    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)
    return _make([a], np.asarray(a.data[index]), bwd)


# ---- nonlinearities and norms ----

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)
    return _make([a], np.where(mask, a.data, 0.0), bwd)


def gelu(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, backend.gelu_bwd(g, a.data))
    return _make([a], backend.gelu_fwd(a.data), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    p = backend.softmax_fwd(a.data)

    def bwd(g):
        _accum(a, backend.softmax_bwd(g, p))
    return _make([a], p, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    y, mean, inv_std = backend.layer_norm_fwd(x.data, gain.data, bias.data, eps)

    def bwd(g):
        gx, ggain, gbias = backend.layer_norm_bwd(g, x.data, gain.data, mean, inv_std)
        _accum(x, gx)
        _accum(gain, ggain)
        _accum(bias, gbias)
    return _make([x, gain, bias], y, bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p) so eval needs no rescale.
    Identity (and no tape record) when not training or p == 0."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def bwd(g):
        _accum(a, g * keep)
    return _make([a], a.data * keep, bwd)


# ---- reductions and scalar math ----

def reduce_sum(a: Tensor, axis=None) -> Tensor:
    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())
    return _make([a], a.data.sum(axis=axis), bwd)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape).copy())
    return _make([a], a.data.mean(axis=axis), bwd)


def reduce_var(a: Tensor, axis=None) -> Tensor:
    """Population variance (ddof 0)."""
    mean = a.data.mean(axis=axis, keepdims=True)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            gexp = np.asarray(g)
        else:
            gexp = np.expand_dims(g, axis)
        _accum(a, gexp * 2.0 * (a.data - mean) / n)
    return _make([a], np.square(a.data - mean).mean(axis=axis), bwd)


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / root)
    return _make([a], root, bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / a.data)
    return _make([a], np.log(a.data), bwd)
