"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Usage::

    tape = GradientTape()
    w = tape.watch(weights, "w")
    loss = ((x @ w) ** 2).sum() * 0.5
    grads = backward(tape, loss)       # {"w": dloss/dw}

Each operation on a ``Tensor`` appends one node (output, inputs, vjp) to
the tape.  ``backward`` walks the tape in reverse, so no topological sort
is needed: creation order is already a valid evaluation order.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, MissingGradientError, NumericOverflowError


class GradientTape:
    def __init__(self):
        self.nodes: list[tuple["Tensor", tuple, Callable]] = []
        self.watched: dict[str, "Tensor"] = {}

    def watch(self, value, name: str) -> "Tensor":
        if name in self.watched:
            raise InvalidArgumentError(f"parameter {name!r} already watched")
        t = Tensor(np.asarray(value, dtype=np.float64), self, requires_grad=True)
        self.watched[name] = t
        return t

    def constant(self, value) -> "Tensor":
        return Tensor(np.asarray(value, dtype=np.float64), self, requires_grad=False)

    def _record(self, data, inputs, vjp) -> "Tensor":
        needs = any(isinstance(x, Tensor) and x.requires_grad for x in inputs)
        out = Tensor(data, self, requires_grad=needs)
        if needs:
            self.nodes.append((out, inputs, vjp))
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> GradientTape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise InvalidArgumentError("no tensor among operands")


class Tensor:
    __array_priority__ = 100

    def __init__(self, data: np.ndarray, tape: GradientTape, requires_grad: bool = False):
        self.data = data
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -_data(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a tensor is not supported")
        return mul(self, 1.0 / _data(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return reduce_sum(self, axis) * (1.0 / n)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    return tape._record(
        ad + bd,
        (a, b),
        lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)),
    )


def neg(a) -> Tensor:
    return a.tape._record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    return tape._record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def square(a: Tensor) -> Tensor:
    ad = a.data
    return a.tape._record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)

    def vjp(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return tape._record(ad @ bd, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    return a.tape._record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return a.tape._record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return a.tape._record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.tape._record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return a.tape._record(np.log(ad), (a,), lambda g: (g / ad,))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    ad = a.data
    scale = (ad > 0) * (1.0 - slope) + slope
    return a.tape._record(ad * scale, (a,), lambda g: (g * scale,))


def normalize_rows(a: Tensor) -> Tensor:
    """Project rows to the unit sphere; VJP applies (I - u u^T) / |x|."""
    ad = a.data
    norm = np.linalg.norm(ad, axis=-1, keepdims=True)
    u = ad / norm

    def vjp(g):
        return ((g - np.sum(g * u, axis=-1, keepdims=True) * u) / norm,)

    return a.tape._record(u, (a,), vjp)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted log-sum-exp; entries equal to -inf contribute zero."""
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return a.tape._record(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def concat(parts, axis: int = -1) -> Tensor:
    tape = _tape_of(*parts)
    datas = [_data(p) for p in parts]
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._record(np.concatenate(datas, axis=axis), tuple(parts), vjp)


def diagonal(a: Tensor) -> Tensor:
    ad = a.data
    n = min(ad.shape)

    def vjp(g):
        out = np.zeros_like(ad)
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return a.tape._record(np.diagonal(ad).copy(), (a,), vjp)


def slice_rows(a: Tensor, start: int, count: int) -> Tensor:
    """Rows ``[start, start + count)`` of ``a``."""
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start : start + count] = g
        return (full,)

    return a.tape._record(a.data[start : start + count], (a,), vjp)


def pairwise_weighted_sqdist(a, b, lam) -> Tensor:
    """``D[i, j] = sum_k lam_k (a_ik - b_jk)^2`` for row sets a (n, d), b (m, d)."""
    tape = _tape_of(a, b, lam)
    ad_, bd, ld = _data(a), _data(b), _data(lam)
    al = ad_ * ld
    sa = np.sum(al * ad_, axis=1)
    sb = np.sum(bd * bd * ld, axis=1)
    out = sa[:, None] + sb[None, :] - 2.0 * (al @ bd.T)

    def vjp(g):
        rs = g.sum(axis=1)
        cs = g.sum(axis=0)
        gb = g @ bd
        gta = g.T @ ad_
        da = 2.0 * ld * (ad_ * rs[:, None] - gb)
        db = 2.0 * ld * (bd * cs[:, None] - gta)
        dl = rs @ (ad_ * ad_) + cs @ (bd * bd) - 2.0 * np.sum(ad_ * gb, axis=0)
        return da, db, dl

    return tape._record(out, (a, b, lam), vjp)


def set_diagonal(a: Tensor, v) -> Tensor:
    """Copy of square ``a`` with its diagonal replaced by ``v``."""
    tape = _tape_of(a, v)
    out = _data(a).copy()
    n = out.shape[0]
    idx = np.arange(n)
    out[idx, idx] = _data(v)

    def vjp(g):
        ga = g.copy()
        ga[idx, idx] = 0.0
        return ga, g[idx, idx].copy()

    return tape._record(out, (a, v), vjp)


def backward(tape: GradientTape, loss: Tensor, allow_unused: bool = False, retain: bool = False) -> dict[str, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients keyed by watched name.

    Unless ``retain`` is set the recorded nodes are dropped afterwards:
    tensors and their tape reference each other, and clearing the node list
    lets the whole graph be freed without waiting for the cycle collector.
    """
    if loss.tape is not tape:
        raise InvalidArgumentError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise InvalidArgumentError("backward needs a scalar loss")
    if not np.all(np.isfinite(loss.data)):
        raise NumericOverflowError("loss is not finite")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for x, gx in zip(inputs, vjp(g)):
            if isinstance(x, Tensor) and x.requires_grad:
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
    result = {}
    for name, t in tape.watched.items():
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise MissingGradientError(f"parameter {name!r} received no gradient")
            g = np.zeros_like(t.data)
        result[name] = np.array(g, dtype=np.float64) if not g.flags.writeable else g
    if not retain:
        tape.nodes = []
    return result
