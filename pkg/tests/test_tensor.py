import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tacnn.errors import ConfigurationError, ShapeError, UsageError
from tacnn.gradcheck import finite_diff_check
from tacnn.layers import conv2d, softmax_xent
from tacnn.tensor import (
    Tape,
    Tensor4,
    backward,
    channel_scale,
    concat,
    elementwise,
    maxout,
    mul,
    no_grad,
    permute,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    temporal_diff,
)

from .oracles import dbl

ALL_PERMS = list(itertools.permutations(range(4)))


def test_tensor_invariants():
    with pytest.raises(ShapeError):
        Tensor4(np.zeros((2, 3, 4)))
    with pytest.raises(ShapeError):
        Tensor4(np.zeros((2, 0, 4, 1)))
    assert Tensor4([[[[1]]]]).dtype == np.float32
    assert dbl(np.zeros((1, 1, 1, 1))).dtype == np.float64


def test_permute_identity_is_bitwise(rng):
    x = Tensor4(rng.normal(size=(2, 3, 4, 5)))
    assert np.array_equal(permute(x, (0, 1, 2, 3)).data, x.data)


def test_permute_joints_to_channels():
    x = Tensor4(np.zeros((1, 32, 64, 25)))
    assert permute(x, (0, 3, 2, 1)).dims == (1, 25, 64, 32)


def test_permute_value_mapping(rng):
    x = Tensor4(rng.normal(size=(2, 3, 4, 5)))
    y = permute(x, (0, 3, 2, 1))
    assert y.data[1, 4, 2, 0] == x.data[1, 0, 2, 4]


def test_permute_rejects_bad_order(rng):
    x = Tensor4(rng.normal(size=(1, 2, 3, 4)))
    with pytest.raises(ConfigurationError):
        permute(x, (0, 1, 1, 3))


@pytest.mark.parametrize("order", ALL_PERMS)
def test_permute_inverse_roundtrip(order, rng):
    x = Tensor4(rng.normal(size=(2, 3, 4, 5)))
    inv = tuple(np.argsort(order))
    assert np.array_equal(permute(permute(x, order), inv).data, x.data)


def test_elementwise_identities(rng):
    x = Tensor4(rng.normal(size=(2, 3, 4, 5)))
    assert np.array_equal(elementwise(x, Tensor4(np.zeros(x.dims)), "add").data, x.data)
    assert np.array_equal(elementwise(x, x, "max").data, x.data)


def test_elementwise_add_matches_loop(rng):
    a = rng.normal(size=(2, 2, 3, 2)).astype(np.float32)
    b = rng.normal(size=(2, 2, 3, 2)).astype(np.float32)
    out = elementwise(Tensor4(a), Tensor4(b), "add").data
    for idx in np.ndindex(a.shape):
        assert out[idx] == np.float32(a[idx] + b[idx])


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise(Tensor4(np.zeros((1, 1, 1, 2))), Tensor4(np.zeros((1, 1, 2, 1))), "add")


def test_max_gradient_ties_go_to_first():
    a = dbl(np.ones((1, 1, 1, 3)))
    b = dbl(np.array([1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))
    a.requires_grad = b.requires_grad = True
    with Tape() as tape:
        backward(reduce_sum(elementwise(a, b, "max")), tape)
    assert a.grad.ravel().tolist() == [1.0, 1.0, 0.0]
    assert b.grad.ravel().tolist() == [0.0, 0.0, 1.0]


def test_reduce_mean(rng):
    c = Tensor4(np.full((2, 3, 4, 5), 7.0))
    assert np.all(reduce_mean(c, 2).data == 7.0)
    assert reduce_mean(Tensor4(np.zeros((1, 256, 4, 2))), 2).dims == (1, 256, 1, 2)
    x = rng.normal(size=(2, 3, 4, 5))
    out = reduce_mean(dbl(x), 2).data
    for n, ch, v in itertools.product(range(2), range(3), range(5)):
        assert out[n, ch, 0, v] == pytest.approx(sum(x[n, ch, t, v] for t in range(4)) / 4, abs=1e-12)
    with pytest.raises(ConfigurationError):
        reduce_mean(c, 4)


def test_reduce_mean_extent_one_is_identity(rng):
    x = Tensor4(rng.normal(size=(2, 1, 3, 4)))
    assert np.array_equal(reduce_mean(x, 1).data, x.data)


def test_backward_sum_and_square(rng):
    x = dbl(rng.normal(size=(1, 2, 3, 4)))
    x.requires_grad = True
    with Tape() as tape:
        backward(reduce_sum(x), tape)
    assert np.array_equal(x.grad, np.ones(x.dims))
    x.grad = None
    with Tape() as tape:
        backward(reduce_sum(mul(x, x)), tape)
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar_and_attached(rng):
    x = dbl(rng.normal(size=(1, 2, 3, 4)))
    x.requires_grad = True
    with Tape() as tape:
        y = relu(x)
        with pytest.raises(ShapeError):
            backward(y, tape)
    with Tape() as tape:
        with pytest.raises(UsageError):
            backward(reduce_sum(dbl(np.ones((1, 1, 1, 1)))), tape)


def test_tape_cleared_and_reuse_is_usage_error(rng):
    x = dbl(rng.normal(size=(1, 1, 2, 2)))
    x.requires_grad = True
    with Tape() as tape:
        loss = reduce_sum(relu(x))
        assert len(tape) == 2
        backward(loss, tape)
        assert len(tape) == 0
        with pytest.raises(UsageError):
            backward(loss, tape)


def test_backward_returns_gradient_map(rng):
    x = dbl(rng.normal(size=(1, 1, 2, 2)))
    x.requires_grad = True
    with Tape() as tape:
        h = scale(x, 3.0)
        grads = backward(reduce_sum(h), tape)
    assert np.allclose(grads[h], 1.0)
    assert np.allclose(grads[x], 3.0)


def test_no_grad_records_nothing(rng):
    x = dbl(rng.normal(size=(1, 1, 2, 2)))
    x.requires_grad = True
    with Tape() as tape, no_grad():
        y = relu(x)
    assert len(tape) == 0 and not y.requires_grad


def test_finite_diff_linear_is_exact(rng):
    w = rng.normal(size=(1, 2, 3, 4))

    def f(x):
        return reduce_sum(mul(x, dbl(w)))

    assert finite_diff_check(f, dbl(rng.normal(size=(1, 2, 3, 4)))) < 1e-10


def test_finite_diff_softmax_xent(rng):
    target = np.array([[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]])
    err = finite_diff_check(lambda z: softmax_xent(z, target), dbl(rng.normal(size=(2, 3, 1, 1))))
    assert err < 1e-6


def test_finite_diff_conv_relu_sum(rng):
    w = dbl(rng.normal(size=(4, 3, 3, 3)))

    def f(x):
        return reduce_sum(relu(conv2d(x, w, None, 1, 1, 1)))

    assert finite_diff_check(f, dbl(rng.normal(size=(2, 3, 5, 4)))) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_structural_op_gradients(seed):
    rng = np.random.default_rng(seed)
    other = dbl(rng.normal(size=(2, 3, 4, 2)))
    gate = dbl(rng.uniform(0.1, 0.9, size=(2, 3, 1, 1)))
    weights = dbl(rng.normal(size=(1, 6, 4, 2)))

    def f(x):
        h = permute(x, (0, 3, 2, 1))
        h = permute(h, (0, 3, 2, 1))
        h = elementwise(h, other, "max")
        h = elementwise(h, sigmoid(x), "mul")
        h = channel_scale(h, gate)
        h = temporal_diff(h)
        h = concat([h, relu(x)], axis=1)
        h = reshape(h, (1, 6, 4, 4))
        h = maxout(reshape(h, (2, 6, 4, 2)), [2])
        return reduce_sum(mul(reduce_mean(h, 0), weights))

    assert finite_diff_check(f, dbl(rng.normal(size=(2, 3, 4, 2)))) < 1e-4


def test_maxout_groups(rng):
    x = Tensor4(rng.normal(size=(3, 2, 1, 2)))
    out = maxout(x, [1, 2]).data
    assert np.array_equal(out[0], x.data[0])
    assert np.array_equal(out[1], np.maximum(x.data[1], x.data[2]))


def test_temporal_diff(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    out = temporal_diff(dbl(x)).data
    for t in range(4):
        assert np.array_equal(out[:, :, t], x[:, :, t + 1] - x[:, :, t])
    assert np.all(out[:, :, 4] == 0)


finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (2, 3, 2, 2), elements=finite), st.sampled_from(ALL_PERMS))
def test_ops_finite_on_finite_inputs(a, order):
    x = Tensor4(a)
    for y in (permute(x, order), sigmoid(x), relu(x), reduce_mean(x, 2), temporal_diff(x),
              elementwise(x, x, "mul")):
        assert np.all(np.isfinite(y.data))
