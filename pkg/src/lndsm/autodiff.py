"""Dense float64 tensors with taped reverse-mode differentiation.

The tape records every primitive in creation order; ``Tape.backward``
replays the records in exact reverse order, accumulating gradients
additively into each tensor's ``grad``. Gradients are allocated lazily,
so nodes that do not influence the loss cost nothing on the way back.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

# When enabled every primitive asserts its output is finite.
DEBUG_CHECK_FINITE = False


class Tensor:
    """A dense float64 array plus its accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape
        if DEBUG_CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NumericalError("non-finite tensor value")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("out", "backward")

    def __init__(self, out, backward):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def tensor(self, data, requires_grad=False):
        return Tensor(data, requires_grad=requires_grad, tape=self)

    def param(self, data):
        """Wrap an array as a differentiable leaf."""
        return Tensor(data, requires_grad=True, tape=self)

    def const(self, data):
        return Tensor(data, requires_grad=False, tape=self)

    def _record(self, out, backward):
        self._records.append(_Record(out, backward))

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and replay all records in reverse."""
        if loss.size != 1:
            raise ValueError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            if rec.out.grad is not None:
                rec.backward(rec.out.grad)


def _as_tensor(x, tape):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, tape=tape)


def _pair(a, b):
    tape = a.tape if isinstance(a, Tensor) else b.tape
    return _as_tensor(a, tape), _as_tensor(b, tape), tape


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _make(tape, data, requires_grad):
    return Tensor(data, requires_grad=requires_grad, tape=tape)


def add(a, b):
    a, b, tape = _pair(a, b)
    out = _make(tape, a.data + b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))
        tape._record(out, backward)
    return out


def sub(a, b):
    a, b, tape = _pair(a, b)
    out = _make(tape, a.data - b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.data.shape))
        tape._record(out, backward)
    return out


def neg(a):
    out = _make(a.tape, -a.data, a.requires_grad)
    if out.requires_grad:
        def backward(g):
            _accum(a, -g)
        a.tape._record(out, backward)
    return out


def mul(a, b):
    a, b, tape = _pair(a, b)
    out = _make(tape, a.data * b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))
        tape._record(out, backward)
    return out


def matmul(a, b):
    a, b, tape = _pair(a, b)
    out = _make(tape, a.data @ b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        tape._record(out, backward)
    return out


def tsum(a, axis=None, keepdims=False):
    out = _make(a.tape, a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)
    if out.requires_grad:
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))
        a.tape._record(out, backward)
    return out


def tmean(a):
    out = _make(a.tape, a.data.mean(), a.requires_grad)
    if out.requires_grad:
        inv = 1.0 / a.data.size
        def backward(g):
            _accum(a, np.broadcast_to(g * inv, a.data.shape))
        a.tape._record(out, backward)
    return out


def square(a):
    out = _make(a.tape, a.data * a.data, a.requires_grad)
    if out.requires_grad:
        def backward(g):
            _accum(a, 2.0 * a.data * g)
        a.tape._record(out, backward)
    return out


def exp(a):
    out = _make(a.tape, np.exp(a.data), a.requires_grad)
    if out.requires_grad:
        def backward(g):
            _accum(a, out.data * g)
        a.tape._record(out, backward)
    return out


def log(a):
    out = _make(a.tape, np.log(a.data), a.requires_grad)
    if out.requires_grad:
        def backward(g):
            _accum(a, g / a.data)
        a.tape._record(out, backward)
    return out


def _sigmoid_np(x):
    # Evaluate in the saturating-safe branch for each sign.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _make(a.tape, _sigmoid_np(a.data), a.requires_grad)
    if out.requires_grad:
        def backward(g):
            _accum(a, out.data * (1.0 - out.data) * g)
        a.tape._record(out, backward)
    return out


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    out = _make(a.tape, _softplus_np(a.data), a.requires_grad)
    if out.requires_grad:
        def backward(g):
            _accum(a, _sigmoid_np(a.data) * g)
        a.tape._record(out, backward)
    return out


def _silu_np(x):
    return x * _sigmoid_np(x)


def silu(a):
    """Sigmoid-weighted linear activation."""
    s = _sigmoid_np(a.data)
    out = _make(a.tape, a.data * s, a.requires_grad)
    if out.requires_grad:
        def backward(g):
            _accum(a, (s * (1.0 + a.data * (1.0 - s))) * g)
        a.tape._record(out, backward)
    return out


def clip(a, lo, hi):
    """Clamp values; gradient passes through wherever lo <= x <= hi."""
    out = _make(a.tape, np.clip(a.data, lo, hi), a.requires_grad)
    if out.requires_grad:
        mask = (a.data >= lo) & (a.data <= hi)
        def backward(g):
            _accum(a, g * mask)
        a.tape._record(out, backward)
    return out


def concat(tensors, axis=0):
    tape = tensors[0].tape
    out = _make(tape, np.concatenate([t.data for t in tensors], axis=axis),
                any(t.requires_grad for t in tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def backward(g):
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(a, b)
                    _accum(t, g[tuple(idx)])
        tape._record(out, backward)
    return out


def take_rows(a, idx):
    idx = np.asarray(idx, dtype=np.intp)
    out = _make(a.tape, a.data[idx], a.requires_grad)
    if out.requires_grad:
        def backward(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)
        a.tape._record(out, backward)
    return out


def slice_cols(a, start, stop):
    out = _make(a.tape, a.data[:, start:stop], a.requires_grad)
    if out.requires_grad:
        def backward(g):
            buf = np.zeros_like(a.data)
            buf[:, start:stop] = g
            _accum(a, buf)
        a.tape._record(out, backward)
    return out


def dot_rows(a, b):
    """Row-wise inner product of two (batch, d) tensors -> (batch,)."""
    return tsum(mul(a, b), axis=1)
