"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every :class:`Var` belongs to exactly one :class:`Tape`. Operations append a
node to the tape; :meth:`Tape.backward` walks the nodes in reverse once and
returns gradients for every leaf. A consumed tape cannot be reused.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised when a tape is misused (reuse after backward, mixed tapes)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "parents", "is_leaf", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape: "Tape", parents=(), is_leaf=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents  # tuple of (Var, vjp)
        self.is_leaf = is_leaf
        self.name = name

    # -- plumbing -----------------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise TapeError("operands are recorded on different tapes")
            return other
        return self.tape.constant(other)

    def _node(self, value, parents) -> "Var":
        return self.tape._record(Var(value, self.tape, parents))

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        o = self._lift(other)
        a, b = self, o
        return self._node(
            a.value + b.value,
            ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))),
        )

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        a, b = self, o
        return self._node(
            a.value - b.value,
            ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))),
        )

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        o = self._lift(other)
        a, b = self, o
        return self._node(
            a.value * b.value,
            (
                (a, lambda g: _unbroadcast(g * b.value, a.shape)),
                (b, lambda g: _unbroadcast(g * a.value, b.shape)),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        a, b = self, o
        return self._node(
            a.value / b.value,
            (
                (a, lambda g: _unbroadcast(g / b.value, a.shape)),
                (b, lambda g: _unbroadcast(-g * a.value / b.value**2, b.shape)),
            ),
        )

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return self._node(-self.value, ((self, lambda g: -g),))

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("only constant exponents are supported")
        x = self.value
        return self._node(x**p, ((self, lambda g: g * p * x ** (p - 1)),))

    def __matmul__(self, other):
        o = self._lift(other)
        a, b = self, o
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul is defined for 2-D operands only")
        return self._node(
            a.value @ b.value,
            ((a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)),
        )

    def __rmatmul__(self, other):
        return self._lift(other) @ self

    def __getitem__(self, idx):
        x = self.value
        shape = x.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out

        return self._node(x[idx], ((self, vjp),))

    # -- shape --------------------------------------------------------------
    def reshape(self, *shape):
        old = self.shape
        return self._node(self.value.reshape(*shape), ((self, lambda g: g.reshape(old)),))

    @property
    def T(self):
        return self._node(self.value.T, ((self, lambda g: g.T),))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return self._node(self.value.sum(axis=axis, keepdims=keepdims), ((self, vjp),))

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


class Tape:
    """Records operations for a single backward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []
        self._params: dict[int, Var] = {}
        self.consumed = False

    def _record(self, var: Var) -> Var:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new tape")
        self.nodes.append(var)
        return var

    def leaf(self, value, name=None) -> Var:
        """Register a differentiable input."""
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new tape")
        v = Var(value, self, is_leaf=True, name=name)
        self.leaves.append(v)
        return v

    def param(self, array: np.ndarray, name=None) -> Var:
        """Leaf bound to a parameter array; repeated calls return the same leaf."""
        key = id(array)
        var = self._params.get(key)
        if var is None:
            var = self.leaf(array, name=name)
            self._params[key] = var
        return var

    def constant(self, value) -> Var:
        return Var(value, self)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar ``loss``.

        Returns a mapping ``id(leaf) -> gradient``; use :meth:`grad` for lookup.
        """
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ValueError("backward() needs a scalar loss")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in node.parents:
                if not parent.parents and not parent.is_leaf:
                    continue  # constant
                pg = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._grads = {id(v): grads.get(id(v), np.zeros_like(v.value)) for v in self.leaves}
        return self._grads

    def grad(self, item) -> np.ndarray:
        """Gradient for a leaf ``Var`` or for a parameter array bound by :meth:`param`."""
        if not self.consumed:
            raise TapeError("backward() has not run")
        if isinstance(item, Var):
            return self._grads[id(item)]
        return self._grads[id(self._params[id(item)])]


# -- elementwise functions (dispatch on Var vs ndarray) -----------------------

def _unary(x, f: Callable, df: Callable):
    if not isinstance(x, Var):
        return f(np.asarray(x, dtype=np.float64))
    v = x.value
    out = f(v)
    return x._node(out, ((x, lambda g: g * df(v, out)),))


def exp(x):
    return _unary(x, np.exp, lambda v, out: out)


def log(x):
    return _unary(x, np.log, lambda v, out: 1.0 / v)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid_np(v) -> np.ndarray:
    return _sigmoid(np.atleast_1d(np.asarray(v, dtype=np.float64))).reshape(np.shape(v))


def sigmoid(x):
    return _unary(x, sigmoid_np, lambda v, out: out * (1.0 - out))


def relu(x):
    # subgradient at 0 is 0
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, out: (v > 0).astype(np.float64))


def clip(x, lo: float, hi: float):
    """Clamp; gradient is zero where the clamp is active."""
    return _unary(
        x,
        lambda v: np.clip(v, lo, hi),
        lambda v, out: ((v >= lo) & (v <= hi)).astype(np.float64),
    )


def maximum(x, floor: float):
    """Elementwise max with a constant floor."""
    return _unary(x, lambda v: np.maximum(v, floor), lambda v, out: (v >= floor).astype(np.float64))


def concat(parts: Sequence, axis: int = -1):
    vars_ = [p for p in parts if isinstance(p, Var)]
    if not vars_:
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    tape = vars_[0].tape
    lifted = [vars_[0]._lift(p) for p in parts]
    values = [p.value for p in lifted]
    out = np.concatenate(values, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in values])
    parents = []
    for p, lo, hi in zip(lifted, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * out.ndim
        sl[ax] = slice(lo, hi)
        parents.append((p, lambda g, sl=tuple(sl): g[sl]))
    return tape._record(Var(out, tape, tuple(parents)))


def value(x) -> np.ndarray:
    """Underlying array of a Var, or the array itself."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
