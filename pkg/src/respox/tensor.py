"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps one float32/float64 ndarray.  Operations build the graph
eagerly; each op output keeps references to its parents plus a closure
that maps the upstream gradient to per-parent gradients.  backward() on
a scalar walks the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)

_GRAD_STACK = [True]


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with the requested op."""


class GraphError(RuntimeError):
    """The autodiff graph was used outside its contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


def grad_enabled() -> bool:
    return _GRAD_STACK[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None

    # ---- introspection ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __float__(self) -> float:
        return self.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- graph walk ----

    def backward(self) -> None:
        if self.size != 1:
            raise GraphError(f"backward() requires a scalar, got shape {self.shape}")
        order = _toposort(self)
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._grad_fn is None:
                continue
            g = node.grad
            if g is None:
                continue
            parts = node._grad_fn(g)
            for parent, pg in zip(node._parents, parts):
                if pg is None:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def abs(self) -> "Tensor":
        return tabs(self)

    def sqrt(self) -> "Tensor":
        return tsqrt(self)

    def t(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        return narrow(self, axis, start, length)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _from_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _check_same_dtype(a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ----


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return _from_op(a.data + c, (a,), lambda g: (g,))
    _check_same_dtype(a, b)
    data = a.data + b.data

    def grad_fn(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        c = float(b)
        return _from_op(a.data - c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        c = float(a)
        return _from_op(c - b.data, (b,), lambda g: (-g,))
    _check_same_dtype(a, b)
    data = a.data - b.data

    def grad_fn(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return _from_op(a.data * c, (a,), lambda g: (g * c,))
    _check_same_dtype(a, b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if not isinstance(a, Tensor):
        c = float(a)
        bd = b.data

        def grad_rfn(g):
            return (-g * c / (bd * bd),)

        return _from_op(c / bd, (b,), grad_rfn)
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data
    data = ad / bd

    def grad_fn(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _from_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _from_op(out, (a,), lambda g: (g * (0.5 / out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---- reductions ----


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def grad_fn(g):
        return (_expand_reduced(np.asarray(g), shape, axis, keepdims),)

    return _from_op(np.asarray(data), (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= shape[ax % len(shape)]

    def grad_fn(g):
        return (_expand_reduced(np.asarray(g) / count, shape, axis, keepdims),)

    return _from_op(np.asarray(data), (a,), grad_fn)


# ---- linear algebra / structure ----


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise ShapeError("matmul expects two tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul is 2-D only, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data
    data = ad @ bd

    def grad_fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _from_op(data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose is 2-D only, got shape {a.shape}")
    return _from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty sequence")
    sizes = [p.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(piece if p.requires_grad else None for p, piece in zip(parts, pieces))

    return _from_op(data, tuple(parts), grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if axis < 0 or axis >= a.ndim:
        raise ShapeError(f"narrow axis {axis} out of range for shape {a.shape}")
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow window [{start}, {start + length}) exceeds axis size {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _from_op(a.data[index].copy(), (a,), grad_fn)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError("take expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"take index out of range for axis size {a.shape[axis]}")
    data = np.take(a.data, idx, axis=axis)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _from_op(data, (a,), grad_fn)


# ---- smooth nonlinearities ----


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _from_op(out, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def grad_fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _from_op(out, (a,), grad_fn)


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        return (g * d,)

    return _from_op(out, (a,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis of x to zero mean / unit variance, then scale-shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm scale/shift must have shape ({x.shape[-1]},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        d = x.shape[-1]
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gbeta = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _from_op(out, (x, gamma, beta), grad_fn)


def backward(loss: Tensor) -> None:
    """Module-level alias: run reverse mode from a scalar loss."""
    loss.backward()
