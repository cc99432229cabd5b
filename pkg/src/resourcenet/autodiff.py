"""Minimal reverse-mode tape over numpy arrays.

The recurrent model uses hand-chained backward passes for speed; this tape
covers everything else (the elementwise MLP baseline, small checks) with a
handful of ops. Leaves created with :func:`param` write their gradient back
into the owning :class:`ParamStore` when :func:`backward` runs.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import DTYPE, ParamStore, StateError, sigmoid as _sigmoid, softmax as _softmax


class Var:
    __slots__ = ("value", "parents", "grad", "store", "name")

    def __init__(self, value, parents: Sequence[Tuple["Var", Callable]] = (), store=None, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = tuple(parents)
        self.grad: Optional[np.ndarray] = None
        self.store = store
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_lift(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def const(value) -> Var:
    return Var(value)


def param(store: ParamStore, name: str) -> Var:
    """Leaf bound to ``store[name]``; its gradient accumulates into the store."""
    return Var(store[name], store=store, name=name)


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value

    def ga(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
        return g @ bv.T if av.ndim == 2 else bv @ g

    def gb(g):
        if av.ndim == 1:
            return np.outer(av, g) if bv.ndim == 2 else g * av
        return av.T @ g

    return Var(av @ bv, [(a, ga), (b, gb)])


def transpose(a) -> Var:
    a = _lift(a)
    return Var(a.value.T, [(a, lambda g: g.T)])


def sigmoid(a) -> Var:
    a = _lift(a)
    y = _sigmoid(a.value)
    return Var(y, [(a, lambda g: g * y * (1.0 - y))])


def tanh(a) -> Var:
    a = _lift(a)
    y = np.tanh(a.value)
    return Var(y, [(a, lambda g: g * (1.0 - y * y))])


def softmax(a) -> Var:
    """Softmax over the last axis."""
    a = _lift(a)
    y = _softmax(a.value)
    return Var(y, [(a, lambda g: y * (g - np.sum(g * y, axis=-1, keepdims=True)))])


def square(a) -> Var:
    a = _lift(a)
    return Var(a.value * a.value, [(a, lambda g: 2.0 * g * a.value)])


def sum_(a) -> Var:
    a = _lift(a)
    return Var(np.sum(a.value), [(a, lambda g: np.full(a.shape, float(g)))])


def mean(a) -> Var:
    a = _lift(a)
    n = a.value.size
    return Var(np.mean(a.value), [(a, lambda g: np.full(a.shape, float(g) / n))])


def concat(parts: List, axis: int = 0) -> Var:
    parts = [_lift(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def slicer(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return Var(np.concatenate([p.value for p in parts], axis=axis),
               [(p, slicer(i)) for i, p in enumerate(parts)])


def _toposort(root: Var) -> List[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order[::-1]


def backward(loss: Var) -> None:
    """Propagate d(loss)/d(node) through the recorded graph.

    Gradients of :func:`param` leaves are added to their store, so repeated
    calls without ``zero_grad`` accumulate.
    """
    if not isinstance(loss, Var) or (not loss.parents and loss.store is None):
        raise StateError("backward called without a recorded forward pass")
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.store is not None:
            node.store.grads[node.name] += g
        for parent, fn in node.parents:
            pg = fn(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
