"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records every intermediate ``Value`` in creation order, which is a
topological order of the computation graph. ``Tape.backward`` therefore visits
each node exactly once, in reverse, accumulating vector-Jacobian products with
a fixed (deterministic) reduction order.

All functions below are polymorphic: if no argument is a ``Value`` they return
a plain ``numpy.ndarray``, so the same code path serves both training (taped)
and inference (untaped).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape", "Value", "make_node",
    "add", "sub", "mul", "div", "neg", "matmul", "pow_const",
    "sin", "cos", "exp", "log", "sqrt", "absolute",
    "sigmoid", "relu", "elu", "clip",
    "vsum", "vmean", "concat", "gather", "gather_pad", "scatter_rows",
    "reshape",
]


def _f(x):
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of ``Value`` nodes with reverse-order backpropagation."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Value] = []

    def leaf(self, data) -> "Value":
        return Value(_f(data), self)

    def zero_grad(self):
        for v in self.nodes:
            v.grad = None

    def backward(self, root: "Value", seed=None):
        """Accumulate gradients of ``root`` into every node's ``.grad``."""
        if root.tape is not self:
            raise ValueError("root was not recorded on this tape")
        self.zero_grad()
        root.grad = np.ones_like(root.data) if seed is None else _f(seed)
        for v in reversed(self.nodes):
            if v.grad is None:
                continue
            for parent, vjp in v._backrefs:
                contrib = vjp(v.grad)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib


class Value:
    """A node in the tape: an ndarray plus vector-Jacobian closures."""

    __slots__ = ("data", "grad", "tape", "_backrefs")

    def __init__(self, data, tape: Tape, backrefs=()):
        self.data = _f(data)
        self.grad = None
        self.tape = tape
        self._backrefs = tuple(backrefs)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Value):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("mixing Values from different tapes")
    return tape


def _data(x):
    return x.data if isinstance(x, Value) else _f(x)


def make_node(tape: Tape | None, data, backrefs) -> "Value | np.ndarray":
    """Create a custom node; ``backrefs`` pairs only the Value parents."""
    refs = [(p, vjp) for p, vjp in backrefs if isinstance(p, Value)]
    if tape is None:
        return _f(data)
    return Value(data, tape, refs)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    tape = _tape_of(a, b)
    da, db = _data(a), _data(b)
    return make_node(tape, da + db, [
        (a, lambda g: _unbroadcast(g, da.shape)),
        (b, lambda g: _unbroadcast(g, db.shape)),
    ])


def sub(a, b):
    tape = _tape_of(a, b)
    da, db = _data(a), _data(b)
    return make_node(tape, da - db, [
        (a, lambda g: _unbroadcast(g, da.shape)),
        (b, lambda g: _unbroadcast(-g, db.shape)),
    ])


def mul(a, b):
    tape = _tape_of(a, b)
    da, db = _data(a), _data(b)
    return make_node(tape, da * db, [
        (a, lambda g: _unbroadcast(g * db, da.shape)),
        (b, lambda g: _unbroadcast(g * da, db.shape)),
    ])


def div(a, b):
    tape = _tape_of(a, b)
    da, db = _data(a), _data(b)
    return make_node(tape, da / db, [
        (a, lambda g: _unbroadcast(g / db, da.shape)),
        (b, lambda g: _unbroadcast(-g * da / (db * db), db.shape)),
    ])


def neg(a):
    tape = _tape_of(a)
    return make_node(tape, -_data(a), [(a, lambda g: -g)])


def matmul(a, b):
    tape = _tape_of(a, b)
    da, db = _data(a), _data(b)
    if da.ndim != 2 or db.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return make_node(tape, da @ db, [
        (a, lambda g: g @ db.T),
        (b, lambda g: da.T @ g),
    ])


def pow_const(a, p):
    tape = _tape_of(a)
    da = _data(a)
    p = float(p)
    return make_node(tape, da ** p, [
        (a, lambda g: g * p * da ** (p - 1.0)),
    ])


# ---------------------------------------------------------------------------
# elementwise transcendentals

def sin(a):
    tape = _tape_of(a)
    da = _data(a)
    return make_node(tape, np.sin(da), [(a, lambda g: g * np.cos(da))])


def cos(a):
    tape = _tape_of(a)
    da = _data(a)
    return make_node(tape, np.cos(da), [(a, lambda g: -g * np.sin(da))])


def exp(a):
    tape = _tape_of(a)
    out = np.exp(_data(a))
    return make_node(tape, out, [(a, lambda g: g * out)])


def log(a):
    tape = _tape_of(a)
    da = _data(a)
    return make_node(tape, np.log(da), [(a, lambda g: g / da)])


def sqrt(a):
    tape = _tape_of(a)
    out = np.sqrt(_data(a))
    return make_node(tape, out, [(a, lambda g: g * (0.5 / out))])


def absolute(a):
    tape = _tape_of(a)
    da = _data(a)
    return make_node(tape, np.abs(da), [(a, lambda g: g * np.sign(da))])


def sigmoid(a):
    tape = _tape_of(a)
    da = _data(a)
    out = np.where(da >= 0, 1.0 / (1.0 + np.exp(-np.abs(da))),
                   np.exp(-np.abs(da)) / (1.0 + np.exp(-np.abs(da))))
    return make_node(tape, out, [(a, lambda g: g * out * (1.0 - out))])


def relu(a):
    tape = _tape_of(a)
    da = _data(a)
    return make_node(tape, np.maximum(da, 0.0), [(a, lambda g: g * (da > 0))])


def elu(a, alpha=1.0):
    tape = _tape_of(a)
    da = _data(a)
    neg_part = alpha * (np.exp(np.minimum(da, 0.0)) - 1.0)
    out = np.where(da > 0, da, neg_part)
    dneg = neg_part + alpha
    return make_node(tape, out, [(a, lambda g: g * np.where(da > 0, 1.0, dneg))])


def clip(a, lo=None, hi=None):
    """Clamp with pass-through gradient strictly inside the range."""
    tape = _tape_of(a)
    da = _data(a)
    out = np.clip(da, lo, hi)
    mask = np.ones_like(da)
    if lo is not None:
        mask = mask * (da >= lo)
    if hi is not None:
        mask = mask * (da <= hi)
    return make_node(tape, out, [(a, lambda g: g * mask)])


# ---------------------------------------------------------------------------
# reductions and shape ops

def vsum(a, axis=None, keepdims=False):
    tape = _tape_of(a)
    da = _data(a)
    out = da.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, da.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, da.shape).copy()

    return make_node(tape, out, [(a, vjp)])


def vmean(a, axis=None, keepdims=False):
    da = _data(a)
    n = da.size if axis is None else da.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    tape = _tape_of(a)
    da = _data(a)
    return make_node(tape, da.reshape(shape), [(a, lambda g: g.reshape(da.shape))])


def concat(parts, axis=0):
    tape = _tape_of(*parts)
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    refs = []
    start = 0
    for p, d in zip(parts, datas):
        n = d.shape[axis]
        sl = [slice(None)] * d.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)
        refs.append((p, lambda g, sl=sl: g[sl]))
        start += n
    return make_node(tape, out, refs)


def gather(a, idx):
    """Row gather ``a[idx]`` along axis 0; scatter-add in the backward pass."""
    tape = _tape_of(a)
    da = _data(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(da)
        np.add.at(out, idx, g)
        return out

    return make_node(tape, da[idx], [(a, vjp)])


def gather_pad(a, idx):
    """Like ``gather`` but index -1 yields a zero row."""
    tape = _tape_of(a)
    da = _data(a)
    idx = np.asarray(idx, dtype=np.intp)
    valid = idx >= 0
    out = np.zeros((len(idx),) + da.shape[1:], dtype=da.dtype)
    out[valid] = da[idx[valid]]

    def vjp(g):
        gout = np.zeros_like(da)
        np.add.at(gout, idx[valid], g[valid])
        return gout

    return make_node(tape, out, [(a, vjp)])


def scatter_rows(contrib, idx, n_rows):
    """Accumulate rows of ``contrib`` into a fresh ``(n_rows, ...)`` array."""
    tape = _tape_of(contrib)
    dc = _data(contrib)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows,) + dc.shape[1:], dtype=dc.dtype)
    np.add.at(out, idx, dc)
    return make_node(tape, out, [(contrib, lambda g: g[idx])])
