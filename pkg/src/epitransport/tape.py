"""A small reverse-mode autodiff tape over float64 numpy arrays.

Only the operations the forecasting model needs are supported. Every
operation records its parents together with a vector-Jacobian product;
``Tensor.backward`` replays the recorded nodes in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents (inference, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tensor:
    """An array node on the tape.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    ``backward``; intermediate gradients are discarded.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "tape_id", "name")
    __array_ufunc__ = None  # make ``ndarray <op> Tensor`` defer to Tensor

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self.tape_id = next(_ids)
        self.name = name

    @classmethod
    def _node(cls, value, parents):
        out = cls.__new__(cls)
        out.value = value
        out.grad = None
        out.name = None
        if not _grad_enabled:
            out.requires_grad = False
            out._parents = ()
            out.tape_id = next(_ids)
            return out
        live = tuple((p, fn) for p, fn in parents if isinstance(p, Tensor) and p.requires_grad)
        out.requires_grad = bool(live)
        out._parents = live
        out.tape_id = next(_ids)
        return out

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- reverse pass ----------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        grads = {self.tape_id: np.asarray(grad, dtype=np.float64)}

        nodes, seen, stack = [], {self.tape_id}, [self]
        while stack:
            node = stack.pop()
            nodes.append(node)
            for parent, _ in node._parents:
                if parent.tape_id not in seen:
                    seen.add(parent.tape_id)
                    stack.append(parent)
        nodes.sort(key=lambda n: n.tape_id, reverse=True)

        for node in nodes:
            g = grads.pop(node.tape_id, None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                prev = grads.get(parent.tape_id)
                grads[parent.tape_id] = contrib if prev is None else prev + contrib

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        a, b = self.value, _value(other)
        return Tensor._node(a + b, [
            (self, lambda g: _unbroadcast(g, a.shape)),
            (other, lambda g: _unbroadcast(g, b.shape)),
        ])

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self.value, _value(other)
        return Tensor._node(a - b, [
            (self, lambda g: _unbroadcast(g, a.shape)),
            (other, lambda g: _unbroadcast(-g, b.shape)),
        ])

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return Tensor._node(-self.value, [(self, lambda g: -g)])

    def __mul__(self, other):
        a, b = self.value, _value(other)
        return Tensor._node(a * b, [
            (self, lambda g: _unbroadcast(g * b, a.shape)),
            (other, lambda g: _unbroadcast(g * a, b.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self.value, _value(other)
        return Tensor._node(a / b, [
            (self, lambda g: _unbroadcast(g / b, a.shape)),
            (other, lambda g: _unbroadcast(-g * a / (b * b), b.shape)),
        ])

    def __rtruediv__(self, other):
        return Tensor(other) / self if not isinstance(other, Tensor) else other / self

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return Tensor._node(a ** p, [(self, lambda g: g * p * a ** (p - 1))])

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # -- shape ops -------------------------------------------------------
    def reshape(self, *shape):
        old = self.value.shape
        return Tensor._node(self.value.reshape(*shape), [(self, lambda g: g.reshape(old))])

    def swapaxes(self, a1, a2):
        return Tensor._node(np.swapaxes(self.value, a1, a2),
                            [(self, lambda g: np.swapaxes(g, a1, a2))])

    @property
    def mT(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx):
        shape = self.value.shape
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)

        def vjp(g):
            out = np.zeros(shape)
            if basic:
                out[idx] = g  # basic indexing never repeats an element
            else:
                np.add.at(out, idx, g)
            return out

        return Tensor._node(self.value[idx], [(self, vjp)])

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.value.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Tensor._node(self.value.sum(axis=axis, keepdims=keepdims), [(self, vjp)])

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod(
            [self.value.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities -------------------------------------
    def exp(self):
        out = np.exp(self.value)
        return Tensor._node(out, [(self, lambda g: g * out)])

    def sqrt(self):
        out = np.sqrt(self.value)

        def vjp(g):
            # zero subgradient at 0, where the derivative is unbounded
            safe = np.where(out > 0, out, 1.0)
            return np.where(out > 0, g * 0.5 / safe, 0.0)

        return Tensor._node(out, [(self, vjp)])

    def tanh(self):
        out = np.tanh(self.value)
        return Tensor._node(out, [(self, lambda g: g * (1.0 - out * out))])

    def sigmoid(self):
        out = _sigmoid(self.value)
        return Tensor._node(out, [(self, lambda g: g * out * (1.0 - out))])

    def softplus(self):
        x = self.value
        return Tensor._node(np.logaddexp(0.0, x), [(self, lambda g: g * _sigmoid(x))])

    def clamp_min(self, lo: float):
        x = self.value
        mask = x > lo
        return Tensor._node(np.where(mask, x, lo), [(self, lambda g: g * mask)])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return Tensor._node(av @ bv, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)),
    ])


def concat(tensors, axis: int = -1) -> Tensor:
    values = [_value(t) for t in tensors]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def piece(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return Tensor._node(out, [(t, piece(i)) for i, t in enumerate(tensors)])


def stack(tensors, axis: int = 0) -> Tensor:
    values = [_value(t) for t in tensors]
    out = np.stack(values, axis=axis)

    def piece(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor._node(out, [(t, piece(i)) for i, t in enumerate(tensors)])


def lincomb(base, coeffs, terms):
    """``base + sum(c * t)`` as a single tape node (Runge-Kutta stage sums)."""
    if not any(isinstance(t, Tensor) for t in (base, *terms)):
        out = np.array(base, dtype=np.float64, copy=True)
        for c, t in zip(coeffs, terms):
            if c != 0.0:
                out = out + c * t
        return out
    pairs = [(c, t) for c, t in zip(coeffs, terms) if c != 0.0]
    bv = _value(base)
    out = bv.copy()
    for c, t in pairs:
        out = out + c * _value(t)
    parents = [(base, lambda g: _unbroadcast(g, bv.shape))]
    for c, t in pairs:
        shape = _value(t).shape
        parents.append((t, lambda g, c=c, shape=shape: _unbroadcast(c * g, shape)))
    return Tensor._node(out, parents)


def values_of(x) -> np.ndarray:
    """Plain array view of a Tensor or array-like."""
    return _value(x)
