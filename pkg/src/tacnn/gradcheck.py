"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .tensor import Tape, Tensor4, backward, no_grad


def finite_diff_check(f, x, h=1e-5, wrt=None, coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a (1,1,1,1) loss tensor and must be deterministic.
    ``wrt`` lists the tensors to check (default: ``[x]``); each must be
    reachable from ``f`` and is marked as requiring grad. ``coords`` limits the number of probed
    coordinates per tensor (``None`` probes all of them).

    The error for one coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    wrt = [x] if wrt is None else list(wrt)
    for t in wrt:
        t.requires_grad = True
    rng = np.random.default_rng(0) if rng is None else rng

    for t in wrt:
        t.grad = None
    with Tape() as tape:
        loss = f(x)
        backward(loss, tape)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]

    def value():
        with no_grad():
            v = float(f(x).data.reshape(()))
        if not np.isfinite(v):
            raise NumericError("non-finite loss during finite differencing")
        return v

    worst = 0.0
    for t, ga in zip(wrt, analytic):
        if not np.all(np.isfinite(ga)):
            raise NumericError("non-finite analytic gradient")
        flat = t.data.reshape(-1)
        n = flat.size
        if coords is None or coords >= n:
            probe = range(n)
        else:
            probe = rng.choice(n, size=coords, replace=False)
        ga_flat = ga.reshape(-1)
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(ga_flat[i] - numeric) / max(1.0, abs(ga_flat[i]))
            worst = max(worst, err)
    return worst


def as_double(x):
    return Tensor4(np.asarray(x, dtype=np.float64), dtype=np.float64)
