"""Dense rank-4 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a :class:`TapeNode` to the active
:class:`Tape`. ``backward`` walks the tape in reverse creation order exactly
once and then clears it. Axis semantics (N, C, T, V or N, V, T, C) are the
caller's business; the core only knows positions.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, NumericError, ShapeError, UsageError

DEBUG = os.environ.get("TACNN_DEBUG", "") not in ("", "0")

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor4:
    """Rank-4 array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"expected 4 axes, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor4(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor4(dims={self.dims}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor4):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)


@dataclass(eq=False)
class TapeNode:
    output: Tensor4
    inputs: tuple
    rule: str
    vjp: Callable[[np.ndarray], Sequence]
    tape: "Tape" = field(repr=False, default=None)


class Tape:
    """Append-only record of differentiable ops for one training step."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _state().stack.append(self)
        return self

    def __exit__(self, *exc):
        _state().stack.pop()
        return False

    def record(self, node):
        node.tape = self
        self.nodes.append(node)

    def clear(self):
        for node in self.nodes:
            if node.output._node is node:
                node.output._node = None
        self.nodes = []


class _ThreadState(threading.local):
    def __init__(self):
        self.stack = [Tape()]
        self.grad_enabled = True


_local = _ThreadState()


def _state():
    return _local


def current_tape():
    return _state().stack[-1]


@contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled():
    return _state().grad_enabled


def _check_finite(arr, rule):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite output from {rule}")


def _make(out_data, inputs, rule, vjp):
    """Wrap a forward result and record its gradient rule if needed."""
    out = Tensor4(out_data, dtype=out_data.dtype)
    if DEBUG and all(np.all(np.isfinite(t.data)) for t in inputs):
        _check_finite(out.data, rule)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = TapeNode(out, tuple(inputs), rule, vjp)
        current_tape().record(node)
        out._node = node
    return out


def backward(loss, tape=None):
    """Propagate d(loss)/d(.) to every tensor that requires grad.

    Leaf tensors accumulate into ``.grad``. Returns a map from each
    grad-requiring tensor reached (leaves and intermediates) to its gradient.
    """
    tape = tape if tape is not None else current_tape()
    if loss.dims != (1, 1, 1, 1):
        raise ShapeError(f"loss must have dims (1,1,1,1), got {loss.dims}")
    node = loss._node
    if node is None or node.tape is not tape:
        raise UsageError("loss is not attached to the active tape")
    if not tape.nodes:
        raise UsageError("tape is empty")

    grads = {id(loss): np.ones_like(loss.data)}
    seen = {id(loss): loss}
    for n in reversed(tape.nodes):
        g = grads.get(id(n.output))
        if g is None:
            continue
        for inp, gi in zip(n.inputs, n.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = inp
    tape.clear()

    result = {}
    for key, g in grads.items():
        t = seen[key]
        result[t] = g
        if t._node is None and t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
    return result


# ---------------------------------------------------------------------------
# structural ops


def _check_perm(order):
    if sorted(order) != [0, 1, 2, 3]:
        raise ConfigurationError(f"invalid permutation {order!r}")


def permute(x, order):
    order = tuple(int(i) for i in order)
    _check_perm(order)
    inverse = tuple(np.argsort(order))
    out = np.ascontiguousarray(x.data.transpose(order))
    return _make(out, (x,), "permute", lambda g: (g.transpose(inverse),))


def reshape(x, dims):
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != x.data.size or len(dims) != 4:
        raise ShapeError(f"cannot reshape {x.dims} to {dims}")
    src = x.dims
    return _make(x.data.reshape(dims), (x,), "reshape", lambda g: (g.reshape(src),))


def concat(xs, axis):
    xs = list(xs)
    if not xs:
        raise InputError("concat of zero tensors")
    for t in xs[1:]:
        rest_a = [d for i, d in enumerate(xs[0].dims) if i != axis]
        rest_b = [d for i, d in enumerate(t.dims) if i != axis]
        if rest_a != rest_b:
            raise ShapeError(f"concat mismatch {xs[0].dims} vs {t.dims} on axis {axis}")
    sizes = [t.dims[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _make(out, xs, "concat", lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------------------
# elementwise


def elementwise(a, b, kind):
    if a.dims != b.dims:
        raise ShapeError(f"elementwise {kind}: {a.dims} vs {b.dims}")
    if kind == "add":
        return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))
    if kind == "mul":
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))
    if kind == "max":
        first = a.data >= b.data  # ties route to the first operand
        out = np.where(first, a.data, b.data)
        return _make(out, (a, b), "max", lambda g: (g * first, g * ~first))
    raise ConfigurationError(f"unknown elementwise kind {kind!r}")


def add(a, b):
    return elementwise(a, b, "add")


def mul(a, b):
    return elementwise(a, b, "mul")


def maximum(a, b):
    return elementwise(a, b, "max")


def scale(x, c):
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), "scale", lambda g: (g * c,))


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def sigmoid(x):
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def channel_scale(x, gate):
    """Multiply each (n, c) plane of ``x`` by ``gate[n, c, 0, 0]``."""
    n, c = x.dims[:2]
    if gate.dims != (n, c, 1, 1):
        raise ShapeError(f"gate dims {gate.dims} do not match {(n, c, 1, 1)}")
    xd, gd = x.data, gate.data

    def vjp(g):
        return g * gd, (g * xd).sum(axis=(2, 3), keepdims=True)

    return _make(xd * gd, (x, gate), "channel_scale", vjp)


# ---------------------------------------------------------------------------
# reductions


def reduce_mean(x, axis):
    if not 0 <= axis < 4:
        raise ConfigurationError(f"axis {axis} out of range")
    extent = x.dims[axis]
    src = x.dims

    def vjp(g):
        return (np.broadcast_to(g / extent, src).copy(),)

    return _make(x.data.mean(axis=axis, keepdims=True), (x,), "reduce_mean", vjp)


def reduce_sum(x):
    """Sum of all elements as a (1,1,1,1) tensor."""
    src = x.dims
    out = x.data.sum().reshape(1, 1, 1, 1)
    return _make(out, (x,), "reduce_sum", lambda g: (np.broadcast_to(g, src).copy(),))


def maxout(x, counts):
    """Elementwise max over consecutive groups along axis 0.

    ``counts[i]`` rows of ``x`` belong to output row ``i``; ties route to the
    earliest row of the group.
    """
    counts = [int(c) for c in counts]
    if any(c < 1 for c in counts) or sum(counts) != x.dims[0]:
        raise InputError(f"group counts {counts} do not cover {x.dims[0]} rows")
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    xd = x.data
    out = np.empty((len(counts),) + x.dims[1:], dtype=xd.dtype)
    picks = []
    for i, (o, c) in enumerate(zip(offsets, counts)):
        block = xd[o:o + c]
        arg = block.argmax(axis=0)  # first occurrence on ties
        out[i] = np.take_along_axis(block, arg[None], axis=0)[0]
        picks.append(arg + o)

    def vjp(g):
        gx = np.zeros_like(xd)
        for i, rows in enumerate(picks):
            idx = np.indices(rows.shape)
            gx[(rows,) + tuple(idx)] += g[i]
        return (gx,)

    return _make(out, (x,), "maxout", vjp)


def temporal_diff(x, axis=2):
    """Forward difference along ``axis``; the final slot is zero."""
    if x.dims[axis] < 2:
        raise InputError("temporal difference needs at least 2 frames")
    xd = x.data
    out = np.zeros_like(xd)
    n = xd.shape[axis]
    lo = [slice(None)] * 4
    hi = [slice(None)] * 4
    lo[axis] = slice(0, n - 1)
    hi[axis] = slice(1, n)
    lo, hi = tuple(lo), tuple(hi)
    out[lo] = xd[hi] - xd[lo]

    def vjp(g):
        gx = np.zeros_like(g)
        gx[hi] += g[lo]
        gx[lo] -= g[lo]
        return (gx,)

    return _make(out, (x,), "temporal_diff", vjp)
