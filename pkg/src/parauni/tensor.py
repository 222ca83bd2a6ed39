"""Dense float32 tensors with reverse-mode automatic differentiation.

Storage is row-major contiguous numpy float32; there are no views or
strides. A define-by-run graph is recorded whenever an operand requires
gradients (and grad mode is on), and `backward` walks it once in reverse
topological order, accumulating gradients into leaf tensors only.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    AxisRangeError,
    EmptinessError,
    RankError,
    ShapeError,
)

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suppress graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float32 array, optionally participating in the grad tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Optional[Callable[[Array], tuple[Optional[Array], ...]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        """The underlying buffer. Treat as read-only after construction."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return _reduce(self, axis, np.sum)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: Array, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return np.ascontiguousarray(grad, dtype=np.float32)


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise AxisRangeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def grad_fn(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def grad_fn(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def grad_fn(g: Array):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _make(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar without adding a graph node for it."""
    factor = float(factor)
    return _make(a.data * np.float32(factor), (a,), lambda g: (g * np.float32(factor),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def gelu(a) -> Tensor:
    """Exact erf-form GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def grad_fn(g: Array):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(np.asarray(out, dtype=np.float32), (a,), grad_fn)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; the subgradient follows the smaller operand (ties -> a)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g: Array):
        return np.where(take_a, g, 0.0).astype(np.float32), np.where(take_a, 0.0, g).astype(np.float32)

    return _make(out, (a, b), grad_fn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to constant bounds; gradient passes only where unclipped."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)

    def grad_fn(g: Array):
        return (np.where(inside, g, 0.0).astype(np.float32),)

    return _make(out, (a,), grad_fn)


# -- reductions -----------------------------------------------------------

def _reduce(a: Tensor, axis: Optional[int], np_fn) -> Tensor:
    if axis is None:
        out = np_fn(a.data)
        shape = a.shape

        def grad_fn(g: Array):
            return (np.broadcast_to(g, shape).astype(np.float32),)

        return _make(np.asarray(out, dtype=np.float32), (a,), grad_fn)
    ax = _check_axis(axis, a.data.ndim, np_fn.__name__)
    out = np_fn(a.data, axis=ax)
    shape = a.shape

    def grad_fn_axis(g: Array):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).astype(np.float32),)

    return _make(out, (a,), grad_fn_axis)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise EmptinessError("mean of an empty tensor")
    if axis is None:
        count = a.size
        out = _reduce(a, None, np.sum)
    else:
        ax = _check_axis(axis, a.data.ndim, "mean")
        count = a.shape[ax]
        out = _reduce(a, ax, np.sum)
    return scale(out, 1.0 / count)


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    out = a.data.reshape(shape)

    def grad_fn(g: Array):
        return (np.ascontiguousarray(g.reshape(old)),)

    return _make(out, (a,), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise RankError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (np.ascontiguousarray(g.T),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise EmptinessError("concat of no tensors")
    ax = _check_axis(axis, parts[0].data.ndim, "concat")
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]

    def grad_fn(g: Array):
        grads, start = [], 0
        for n in sizes:
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(start, start + n)
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
            start += n
        return tuple(grads)

    return _make(out, tuple(parts), grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    ax = _check_axis(axis, a.data.ndim, "narrow")
    if start < 0 or start + length > a.shape[ax]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}) outside axis {ax} of shape {a.shape}"
        )
    sl = [slice(None)] * a.data.ndim
    sl[ax] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(sl)])
    shape = a.shape

    def grad_fn(g: Array):
        full = np.zeros(shape, dtype=np.float32)
        full[tuple(sl)] = g
        return (full,)

    return _make(out, (a,), grad_fn)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup (embedding); gradient scatter-adds into the table."""
    idx = np.asarray(list(ids), dtype=np.int64)
    out = table.data[idx]
    shape = table.shape

    def grad_fn(g: Array):
        full = np.zeros(shape, dtype=np.float32)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (table,), grad_fn)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def grad_fn(g: Array):
        return np.ascontiguousarray(g @ b_data.T), np.ascontiguousarray(a_data.T @ g)

    return _make(out, (a, b), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(axis, a.data.ndim, "softmax")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def grad_fn(g: Array):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), grad_fn)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise EmptinessError("layernorm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} must be ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = centered * rstd
    out = gain.data * xhat + bias.data
    gain_data = gain.data

    def grad_fn(g: Array):
        dxhat = g * gain_data
        # standard layernorm backward, vectorized over leading axes
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g
        return (
            dx.astype(np.float32),
            np.ascontiguousarray(dgain, dtype=np.float32),
            np.ascontiguousarray(dbias, dtype=np.float32),
        )

    return _make(out, (x, gain, bias), grad_fn)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[Array] = None) -> Tensor:
    """softmax(q k^T / sqrt(D)) v, composed from the primitive ops.

    `mask` is an optional additive constant of shape [Nq, Nk] (e.g. a causal
    mask of large negatives above the diagonal).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: q width {q.shape} != k width {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: k rows {k.shape[0]} != v rows {v.shape[0]}")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    return matmul(softmax(scores, axis=-1), v)


# -- backward pass --------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    Visits each graph node exactly once in reverse topological order and
    never mutates forward values. Leaf gradients accumulate across calls.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    flowing: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def finite_difference(fn: Callable[[], float], params: Iterable[Tensor], h: float = 1e-3) -> list[Array]:
    """Central-difference gradients of fn() w.r.t. each param, for testing.

    Divides by the step width actually realized in float32 storage, which
    removes the dominant rounding term of naive f32 differencing.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            up_x = np.float32(float(orig) + h)
            down_x = np.float32(float(orig) - h)
            flat[i] = up_x
            up = fn()
            flat[i] = down_x
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (float(up_x) - float(down_x))
        grads.append(g)
    return grads
