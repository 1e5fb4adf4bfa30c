"""Map-attend-group-map blocks operating on coordinate and joint channels."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ShapeError
from .layers import BatchNorm2d, Conv2d, Module, SqueezeExcite, conv2d, maxpool2d
from .tensor import add, relu


def check_groups(channels, n):
    if n < 2 or n % 2:
        raise ConfigurationError(f"group count must be even and >= 2, got {n}")
    if channels % n:
        raise ConfigurationError(f"{channels} channels not divisible by {n} groups")


def dual_grouped_conv(x, branch_a, branch_b):
    """Sum of two parallel grouped convolutions.

    ``branch_a``/``branch_b`` are ``(weight, bias, groups, padding)`` tuples.
    The first uses ``n`` groups and a (3,1) or (3,3) kernel with same
    padding, the second a 1x1 kernel with ``n/2`` groups.
    """
    wa, ba, ga, pa = branch_a
    wb, bb, gb, pb = branch_b
    return add(conv2d(x, wa, ba, 1, pa, ga), conv2d(x, wb, bb, 1, pb, gb))


def _tracer(trace, prefix):
    def log(name, t):
        if trace is not None:
            trace.append((f"{prefix}.{name}", t.dims))
        return t
    return log


class DualGroupedConv(Module):
    def __init__(self, channels, n, kernel_a=(3, 1), rng=None, dtype=np.float32):
        super().__init__()
        check_groups(channels, n)
        kh, kw = kernel_a
        self.n = n
        self.branch_a = Conv2d(channels, channels, (kh, kw), groups=n,
                               padding=(kh // 2, kw // 2), rng=rng, dtype=dtype)
        self.branch_b = Conv2d(channels, channels, 1, groups=n // 2, rng=rng, dtype=dtype)

    def forward(self, x):
        a, b = self.branch_a, self.branch_b
        return dual_grouped_conv(
            x,
            (a.weight, a.bias, a.groups, a.padding),
            (b.weight, b.bias, b.groups, b.padding),
        )


class CAG(Module):
    """Coordinate aware grouping: (N, C, T, V) -> (N, out, T, V)."""

    def __init__(self, in_coords=3, hidden=64, grouped=30, out=32, n=10, rng=None, dtype=np.float32):
        super().__init__()
        check_groups(grouped, n)
        self.in_coords = in_coords
        self.map_in = Conv2d(in_coords, hidden, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(hidden, dtype=dtype)
        self.map_mid = Conv2d(hidden, grouped, 1, rng=rng, dtype=dtype)
        self.se = SqueezeExcite(grouped, 1, rng=rng, dtype=dtype)
        self.dual = DualGroupedConv(grouped, n, (3, 1), rng=rng, dtype=dtype)
        self.map_out = Conv2d(grouped, out, 1, rng=rng, dtype=dtype)

    def forward(self, x, trace=None):
        if x.dims[1] != self.in_coords:
            raise ShapeError(f"CAG expects {self.in_coords} coordinate channels, got {x.dims[1]}")
        log = _tracer(trace, "cag")
        h = log("map_in", relu(self.bn(self.map_in(x))))
        h = log("map_mid", self.map_mid(h))
        h = log("se", self.se(h))
        h = log("dual", self.dual(h))
        return log("map_out", self.map_out(h))


class VAG(Module):
    """Virtual-part aware grouping on joints-as-channels input.

    (N, V, T, W) -> (N, tail, T/4, W/4); pooling uses ceil mode so reduced
    shapes with odd extents still run.
    """

    def __init__(self, joints=25, grouped=30, out=32, tail=64, n=6, rng=None, dtype=np.float32):
        super().__init__()
        check_groups(grouped, n)
        self.joints = joints
        self.map_in = Conv2d(joints, grouped, 1, rng=rng, dtype=dtype)
        self.se = SqueezeExcite(grouped, 1, rng=rng, dtype=dtype)
        self.dual = DualGroupedConv(grouped, n, (3, 3), rng=rng, dtype=dtype)
        self.map_out = Conv2d(grouped, out, 1, rng=rng, dtype=dtype)
        self.tail = Conv2d(out, tail, 3, padding=1, rng=rng, dtype=dtype)

    def forward(self, x, trace=None):
        if x.dims[1] != self.joints:
            raise ShapeError(f"VAG expects {self.joints} joint channels, got {x.dims[1]}")
        log = _tracer(trace, "vag")
        h = log("map_in", self.map_in(x))
        h = log("se", self.se(h))
        h = log("dual", self.dual(h))
        h = log("map_out", self.map_out(h))
        h = self.tail(maxpool2d(h, ceil_mode=True))
        return log("tail", maxpool2d(h, ceil_mode=True))
