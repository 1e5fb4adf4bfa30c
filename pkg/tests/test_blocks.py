import numpy as np
import pytest

from tacnn.blocks import CAG, VAG, DualGroupedConv, check_groups
from tacnn.errors import ConfigurationError, ShapeError
from tacnn.gradcheck import finite_diff_check
from tacnn.tensor import Tensor4, reduce_sum

from .oracles import conv2d_loops, dbl


@pytest.mark.parametrize("channels,n", [(30, 3), (30, 0), (30, 4), (30, 8)])
def test_bad_group_counts(channels, n):
    with pytest.raises(ConfigurationError):
        check_groups(channels, n)


def test_group_count_eight_with_wider_grouping():
    check_groups(32, 8)
    DualGroupedConv(32, 8)


@pytest.mark.parametrize("kernel", [(3, 1), (3, 3)])
def test_dual_conv_is_sum_of_branches(kernel, rng):
    dual = DualGroupedConv(12, 6, kernel, rng=rng).astype(np.float64)
    x = rng.normal(size=(2, 12, 5, 4))
    a, b = dual.branch_a, dual.branch_b
    expect = (conv2d_loops(x, a.weight.data, a.bias.data.ravel(), 1, (kernel[0] // 2, kernel[1] // 2), 6)
              + conv2d_loops(x, b.weight.data, b.bias.data.ravel(), 1, (0, 0), 3))
    assert np.max(np.abs(dual(dbl(x)).data - expect)) < 1e-12
    assert a.weight.dims == (12, 2) + kernel and b.weight.dims == (12, 4, 1, 1)


def test_cag_shapes_and_trace(rng):
    cag = CAG(rng=rng)
    trace = []
    out = cag(Tensor4(rng.normal(size=(1, 3, 64, 25))), trace)
    assert out.dims == (1, 32, 64, 25)
    assert trace == [
        ("cag.map_in", (1, 64, 64, 25)),
        ("cag.map_mid", (1, 30, 64, 25)),
        ("cag.se", (1, 30, 64, 25)),
        ("cag.dual", (1, 30, 64, 25)),
        ("cag.map_out", (1, 32, 64, 25)),
    ]
    with pytest.raises(ShapeError):
        cag(Tensor4(np.zeros((1, 2, 4, 25))))


def test_vag_shapes_and_trace(rng):
    vag = VAG(rng=rng)
    trace = []
    out = vag(Tensor4(rng.normal(size=(1, 25, 64, 32))), trace)
    assert out.dims == (1, 64, 16, 8)
    assert [t[1] for t in trace] == [(1, 30, 64, 32)] * 3 + [(1, 32, 64, 32), (1, 64, 16, 8)]
    with pytest.raises(ShapeError):
        vag(Tensor4(np.zeros((1, 5, 4, 32))))


def test_cag_parameter_count():
    # conv 3->64, BN, conv 64->30, SE r=1, dual (30/10 groups), conv 30->32
    expected = (3 * 64 + 64) + 128 + (64 * 30 + 30) + (2 * 900 + 60) + (30 * 3 * 3 + 30 + 30 * 6 + 30) + (30 * 32 + 32)
    assert CAG().num_parameters() == expected


def test_cag_gradient(rng):
    cag = CAG(3, 8, 6, 4, 2, rng=rng).astype(np.float64)
    x = dbl(rng.normal(size=(2, 3, 4, 3)))
    w = dbl(rng.normal(size=(2, 4, 4, 3)))
    f = lambda t: reduce_sum(cag(t) * w)  # noqa: E731
    assert finite_diff_check(f, x) < 1e-4
    for p in cag.parameters():
        assert finite_diff_check(lambda _: reduce_sum(cag(x) * w), p, coords=6, rng=rng) < 1e-4


def test_vag_gradient(rng):
    vag = VAG(3, 6, 4, 5, 2, rng=rng).astype(np.float64)
    x = dbl(rng.normal(size=(2, 3, 8, 4)))
    w = dbl(rng.normal(size=(2, 5, 2, 1)))
    f = lambda t: reduce_sum(vag(t) * w)  # noqa: E731
    assert finite_diff_check(f, x) < 1e-4
    for p in vag.parameters():
        assert finite_diff_check(lambda _: reduce_sum(vag(x) * w), p, coords=6, rng=rng) < 1e-4
