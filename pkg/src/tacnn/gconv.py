"""Graph convolution and its exact rewrite as a 1x1 convolution over joints.

Aggregating joints with an adjacency ``A`` computes

    Y[c, t, v] = sum_u X[c, t, u] * A[u, v]

Swapping the joint axis into the channel position turns this into a 1x1
convolution whose weight is ``w[v, u] = A[u, v]``. Worked 2-joint case: with
``A = [[a, b], [c, d]]`` the output joint 0 is ``a*x0 + c*x1``, i.e. kernel
row 0 is ``(a, c)`` -- the first column of ``A``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .layers import conv2d
from .tensor import Tensor4, no_grad, permute

JOINTS_AS_CHANNELS = (0, 3, 2, 1)


@dataclass
class GraphConvParams:
    adjacency: np.ndarray
    transform: np.ndarray | None = None  # (C', C)

    def __post_init__(self):
        a = np.asarray(self.adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InputError(f"adjacency must be square, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InputError("adjacency has non-finite entries")
        self.adjacency = a
        if self.transform is not None:
            self.transform = np.asarray(self.transform)
            if self.transform.ndim != 2:
                raise InputError("feature transform must be a matrix")


def graph_conv(x, params):
    """``Y = W X A`` on ``(N, C, T, V)``; ``W`` is skipped when absent."""
    a = params.adjacency
    xd = x.data if isinstance(x, Tensor4) else np.asarray(x)
    n, c, t, v = xd.shape
    if a.shape[0] != v:
        raise ShapeError(f"adjacency is {a.shape[0]}x{a.shape[0]} but input has {v} joints")
    if params.transform is not None:
        if params.transform.shape[1] != c:
            raise ShapeError(f"transform {params.transform.shape} does not accept {c} channels")
        xd = np.einsum("dc,nctv->ndtv", params.transform.astype(xd.dtype), xd)
    return Tensor4(xd @ a.astype(xd.dtype))


def adjacency_to_conv_weights(adjacency):
    """1x1 kernel ``(V, V, 1, 1)`` with ``w[v, u] = A[u, v]``."""
    a = np.asarray(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"adjacency must be square, got {a.shape}")
    return np.ascontiguousarray(a.T)[:, :, None, None]


def transform_to_conv_weights(transform):
    w = np.asarray(transform)
    return np.ascontiguousarray(w)[:, :, None, None]


def graph_conv_as_conv(x, params):
    """Same result as :func:`graph_conv`, computed with 1x1 convolutions."""
    x = x if isinstance(x, Tensor4) else Tensor4(x)
    dt = x.dtype
    with no_grad():
        if params.transform is not None:
            x = conv2d(x, Tensor4(transform_to_conv_weights(params.transform), dtype=dt))
        h = permute(x, JOINTS_AS_CHANNELS)
        h = conv2d(h, Tensor4(adjacency_to_conv_weights(params.adjacency), dtype=dt))
        return permute(h, JOINTS_AS_CHANNELS)


@dataclass
class EquivReport:
    trials: int
    passed: int
    max_abs_error: float
    tolerance: float
    dtype: str

    @property
    def ok(self):
        return self.passed == self.trials

    def text(self):
        status = "PASS" if self.ok else "FAIL"
        return (f"graph-conv equivalence [{self.dtype}]: {status} "
                f"{self.passed}/{self.trials} trials, max abs error {self.max_abs_error:.3e} "
                f"(tolerance {self.tolerance:.0e})")


def equiv_report(trials=1000, joints=(3, 5, 25), channels=(1, 3, 8), frames=(1, 4),
                 dtype=np.float32, seed=0, tolerance=None, with_transform=None):
    """Randomized check that graph convolution equals its convolution rewrite.

    Odd trials also fold a random feature transform ``W`` in. ``with_transform``
    forces it on or off for every trial.
    """
    if trials < 1:
        raise InputError("need at least one trial")
    dtype = np.dtype(dtype)
    if tolerance is None:
        tolerance = 1e-5 if dtype == np.float32 else 1e-12
    rng = np.random.default_rng(seed)
    worst, passed = 0.0, 0
    for i in range(trials):
        v = int(rng.choice(joints))
        c = int(rng.choice(channels))
        t = int(rng.choice(frames))
        x = rng.uniform(-1, 1, size=(1, c, t, v)).astype(dtype)
        a = rng.uniform(-1, 1, size=(v, v)).astype(dtype)
        use_w = (i % 2 == 1) if with_transform is None else with_transform
        w = rng.uniform(-1, 1, size=(int(rng.choice(channels)), c)).astype(dtype) if use_w else None
        params = GraphConvParams(a, w)
        ref = graph_conv(Tensor4(x), params).data
        got = graph_conv_as_conv(Tensor4(x), params).data
        err = float(np.max(np.abs(ref - got)))
        worst = max(worst, err)
        passed += err < tolerance
    return EquivReport(trials, passed, worst, tolerance, dtype.name)
