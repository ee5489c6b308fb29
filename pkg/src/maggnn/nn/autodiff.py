"""Reverse-mode differentiation over dense float64 matrices.

Only the operations the models in this package compose are provided. Every
op records a closure that maps the output gradient to input gradients;
``backward`` walks the recorded graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from ..errors import ShapeError, StateError


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; results are constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(value, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    parents = tuple(parents)
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, True, _parents=parents, _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.add(a.value, b.value)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.value, a.shape),
                                         _unbroadcast(g * a.value, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.value @ b.value
    return _make(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def const_matmul(m, x: Tensor) -> Tensor:
    """``m @ x`` for a constant (dense or scipy sparse) left operand."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"const_matmul shape mismatch {m.shape} @ {x.shape}")
    out = np.asarray(m @ x.value)

    def back(g):
        mt = m.T.tocsr() if sp.issparse(m) else np.asarray(m).T
        return (np.asarray(mt @ g),)
    return _make(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _make(x.value * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.value for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))
    return _make(out, xs, back)


def index(x: Tensor, idx) -> Tensor:
    out = x.value[idx]

    def back(g):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        return (full,)
    return _make(out, (x,), back)


def take_flat(x: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Elements of ``x`` at positions of its row-major flattening."""
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    out = x.value.reshape(-1)[flat_idx]

    def back(g):
        full = np.zeros(x.value.size)
        np.add.at(full, flat_idx, g)
        return (full.reshape(x.shape),)
    return _make(out, (x,), back)


def repeat_rows(x: Tensor, counts: np.ndarray) -> Tensor:
    """Row i of ``x`` repeated ``counts[i]`` times."""
    counts = np.asarray(counts, dtype=np.int64)
    owner = np.repeat(np.arange(x.shape[0]), counts)
    out = x.value[owner]

    def back(g):
        full = np.zeros_like(x.value)
        np.add.at(full, owner, g)
        return (full,)
    return _make(out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_rows(x: Tensor) -> Tensor:
    """Column sums, keeping a leading axis of size 1."""
    return _make(x.value.sum(axis=0, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.value.size
    return _make(np.array(x.value.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def square(x: Tensor) -> Tensor:
    return _make(x.value ** 2, (x,), lambda g: (2.0 * g * x.value,))


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax."""
    z = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise standardisation (no affine part; compose with ``mul``/``add``)."""
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)
    return _make(y, (x,), back)


def batch_norm(x: Tensor, eps: float = 1e-5):
    """Per-column standardisation over rows; returns (y, batch mean, batch variance)."""
    mu = x.value.mean(axis=0, keepdims=True)
    xc = x.value - mu
    var = (xc ** 2).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=0, keepdims=True)
        gy = (g * y).mean(axis=0, keepdims=True)
        return (inv * (g - gm - y * gy),)
    return _make(y, (x,), back), mu, var


def detach(x: Tensor) -> Tensor:
    return Tensor(x.value.copy())


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The recorded graph is released afterwards; a second call on the same
    loss raises ``StateError``.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad or loss.is_leaf:
        raise StateError("backward called on a value with no recorded computation")
    if loss._consumed:
        raise StateError("computation already consumed by a previous backward")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._consumed = True
        node._backward = None
        node._parents = ()
    loss._consumed = True
