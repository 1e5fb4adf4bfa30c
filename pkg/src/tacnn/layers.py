"""Layer primitives: functional ops with gradient rules, plus stateful modules.

Functional ops take and return :class:`~tacnn.tensor.Tensor4`. Modules own
their parameters (``Tensor4`` with ``requires_grad``) and buffers (plain
numpy arrays such as batch-norm running statistics).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, ShapeError
from .tensor import (
    Tensor4,
    _make,
    channel_scale,
    reduce_mean,
    relu,
    sigmoid,
)

# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation


class _MacState(threading.local):
    def __init__(self):
        self.counters = []


_macs = _MacState()


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op, n):
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextmanager
def count_macs():
    """Count multiply-accumulates executed by conv2d/linear inside the block."""
    counter = MacCounter()
    _macs.counters.append(counter)
    try:
        yield counter
    finally:
        _macs.counters.pop()


def _tally(op, n):
    for c in _macs.counters:
        c.add(op, n)


# ---------------------------------------------------------------------------
# functional ops


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(h, w, kernel, stride=1, padding=0):
    kh, kw = _pair(kernel)
    ph, pw = _pair(padding)
    return (h + 2 * ph - kh) // stride + 1, (w + 2 * pw - kw) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 2-D cross-correlation with zero padding.

    ``weight`` has dims ``(out, in/groups, kh, kw)``; ``bias`` is
    ``(1, out, 1, 1)`` or ``None``.
    """
    n, cin, h, w = x.dims
    cout, cg, kh, kw = weight.dims
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigurationError(f"channels {cin}->{cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"weight {weight.dims} incompatible with {cin} input channels / {groups} groups")
    if bias is not None and bias.dims != (1, cout, 1, 1):
        raise ShapeError(f"bias dims {bias.dims} != {(1, cout, 1, 1)}")
    ph, pw = _pair(padding)
    s = int(stride)
    ho, wo = conv_output_size(h, w, (kh, kw), s, (ph, pw))
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(h, w)}")
    g = groups
    og = cout // g

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    # (N, Cin, Ho, Wo, kh, kw) -> (G, Cg*kh*kw, N*Ho*Wo)
    cols = (
        win.reshape(n, g, cg, ho, wo, kh, kw)
        .transpose(1, 2, 5, 6, 0, 3, 4)
        .reshape(g, cg * kh * kw, n * ho * wo)
    )
    wm = weight.data.reshape(g, og, cg * kh * kw)
    out = (wm @ cols).reshape(g, og, n, ho, wo).transpose(2, 0, 1, 3, 4).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out)
    _tally("conv2d", n * cout * ho * wo * cg * kh * kw)

    hp, wp = xp.shape[2], xp.shape[3]

    def vjp(grad):
        gm = grad.reshape(n, g, og, ho, wo).transpose(1, 2, 0, 3, 4).reshape(g, og, n * ho * wo)
        dw = (gm @ cols.transpose(0, 2, 1)).reshape(weight.dims) if weight.requires_grad else None
        db = grad.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1) if bias is not None else None
        dx = None
        if x.requires_grad:
            dcols = (
                (wm.transpose(0, 2, 1) @ gm)
                .reshape(g, cg, kh, kw, n, ho, wo)
                .transpose(4, 0, 1, 2, 3, 5, 6)
                .reshape(n, cin, kh, kw, ho, wo)
            )
            dxp = np.zeros((n, cin, hp, wp), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
            dx = dxp[:, :, ph:ph + h, pw:pw + w]
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, inputs, "conv2d", vjp)


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel normalization over (N, H, W).

    Training mode normalizes with batch statistics and updates the running
    buffers in place: ``running = momentum * running + (1 - momentum) * batch``
    (the running variance uses the unbiased batch estimate). Eval mode uses the
    running buffers.
    """
    n, c, h, w = x.dims
    if gamma.dims != (1, c, 1, 1) or beta.dims != (1, c, 1, 1) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm channel mismatch for input {x.dims}")
    xd = x.data
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(c)
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        m = None
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    gd, bd = gamma.data, beta.data
    out = gd * xhat + bd

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        dxhat = g * gd
        if training:
            dx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), "batchnorm", vjp)


def maxpool2d(x, ceil_mode=False):
    """2x2 max pooling with stride 2.

    Odd extents raise unless ``ceil_mode`` is set, in which case the trailing
    partial window is pooled over its valid elements. Gradient goes to the
    first maximum in row-major window order.
    """
    n, c, h, w = x.dims
    if (h % 2 or w % 2) and not ceil_mode:
        raise ShapeError(f"maxpool2d needs even extents, got {(h, w)}")
    hp, wp = h + h % 2, w + w % 2
    xd = x.data
    if (hp, wp) != (h, w):
        xd = np.pad(xd, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)), constant_values=-np.inf)
    ho, wo = hp // 2, wp // 2
    win = xd.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp)
        return (gx[:, :, :h, :w],)

    return _make(np.ascontiguousarray(out), (x,), "maxpool2d", vjp)


def dropout(x, p=0.5, training=True, rng=None):
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    rng = np.random.default_rng() if rng is None else rng
    keep = rng.random(x.dims) >= p
    factor = keep.astype(x.dtype) / x.dtype.type(1 - p)
    return _make(x.data * factor, (x,), "dropout", lambda g: (g * factor,))


def linear(x, weight, bias=None):
    """Fully connected map on ``(N, F, 1, 1)`` with weight ``(K, F, 1, 1)``."""
    n, f, h, w = x.dims
    k = weight.dims[0]
    if (h, w) != (1, 1) or weight.dims != (k, f, 1, 1):
        raise ShapeError(f"linear: input {x.dims} vs weight {weight.dims}")
    xm = x.data.reshape(n, f)
    wm = weight.data.reshape(k, f)
    out = xm @ wm.T
    if bias is not None:
        if bias.dims != (1, k, 1, 1):
            raise ShapeError(f"bias dims {bias.dims} != {(1, k, 1, 1)}")
        out = out + bias.data.reshape(1, k)
    _tally("linear", n * f * k)

    def vjp(g):
        gm = g.reshape(n, k)
        dx = (gm @ wm).reshape(n, f, 1, 1)
        dw = (gm.T @ xm).reshape(k, f, 1, 1)
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0).reshape(1, k, 1, 1)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out.reshape(n, k, 1, 1), inputs, "linear", vjp)


def log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(np.asarray(z)))


def check_target(target, k=None, tol=1e-6):
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t[None]
    if k is not None and t.shape[1] != k:
        raise InputError(f"target has {t.shape[1]} classes, logits have {k}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1) > tol):
        raise InputError("target rows must be nonnegative and sum to 1")
    return t


def softmax_xent(logits, target):
    """Mean soft-target cross-entropy over the batch, as a (1,1,1,1) tensor."""
    n, k = logits.dims[:2]
    if logits.dims[2:] != (1, 1):
        raise ShapeError(f"logits must be (N, K, 1, 1), got {logits.dims}")
    t = check_target(target, k).astype(logits.dtype)
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} logit rows")
    z = logits.data.reshape(n, k)
    logp = log_softmax(z)
    loss = -(t * logp).sum() / n
    p = np.exp(logp)

    def vjp(g):
        return (((p - t) / n * g.reshape(())).reshape(n, k, 1, 1),)

    return _make(np.asarray(loss, dtype=logits.dtype).reshape(1, 1, 1, 1), (logits,), "softmax_xent", vjp)


def se_attention(x, w1, b1, w2, b2):
    """Squeeze-and-excitation gating. Returns ``(scaled, gate)``."""
    squeezed = reduce_mean(reduce_mean(x, 2), 3)
    hidden = relu(linear(squeezed, w1, b1))
    gate = sigmoid(linear(hidden, w2, b2))
    return channel_scale(x, gate), gate


# ---------------------------------------------------------------------------
# modules


class Module:
    """Minimal parameter container with train/eval switching."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor4) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Convert parameters and buffers in place (tensor identities kept)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in m._buffers:
                arr = getattr(m, name).astype(dtype)
                m._buffers[name] = arr
                object.__setattr__(m, name, arr)
        return self

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor4(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=1, groups=1, stride=1, padding=0,
                 bias=True, rng=None, dtype=np.float32):
        super().__init__()
        kh, kw = _pair(kernel)
        if groups < 1 or in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.groups = groups
        self.stride = stride
        self.padding = _pair(padding)
        fan_in = in_channels // groups * kh * kw
        self.weight = _uniform(rng, (out_channels, in_channels // groups, kh, kw), fan_in, dtype)
        self.bias = _uniform(rng, (1, out_channels, 1, 1), fan_in, dtype) if bias else None

    def forward(self, x):
        if x.dims[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.dims[1]}")
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor4(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor4(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _uniform(rng, (out_features, in_features, 1, 1), in_features, dtype)
        self.bias = _uniform(rng, (1, out_features, 1, 1), in_features, dtype) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class SqueezeExcite(Module):
    """Channel attention; the most recent gate is kept in ``last_gate``."""

    def __init__(self, channels, reduction=1, rng=None, dtype=np.float32):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(f"{channels} channels not divisible by reduction {reduction}")
        self.channels = channels
        self.reduction = reduction
        self.fc1 = Linear(channels, channels // reduction, rng=rng, dtype=dtype)
        self.fc2 = Linear(channels // reduction, channels, rng=rng, dtype=dtype)
        self.last_gate = None
        self.force_open = False

    def forward(self, x):
        if x.dims[1] != self.channels:
            raise ShapeError(f"SE expects {self.channels} channels, got {x.dims[1]}")
        if self.force_open:
            self.last_gate = np.ones(x.dims[:2], dtype=x.dtype)
            return x
        out, gate = se_attention(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)
        self.last_gate = gate.data.reshape(x.dims[:2]).copy()
        return out


class Dropout(Module):
    def __init__(self, p=0.5, rng=None):
        super().__init__()
        if not 0 <= p < 1:
            raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng() if rng is None else rng

    def forward(self, x):
        return dropout(x, self.p, self.training, self.rng)
