import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacnn.errors import ConfigurationError, InputError, ShapeError
from tacnn.gradcheck import finite_diff_check
from tacnn.layers import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    SqueezeExcite,
    conv2d,
    count_macs,
    dropout,
    linear,
    maxpool2d,
    se_attention,
    softmax_xent,
)
from tacnn.tensor import Tensor4, concat, reduce_sum

from .oracles import conv2d_loops, dbl, maxpool_loops


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 4, 5, 3)).astype(np.float32)
    w = np.zeros((4, 4, 1, 1), dtype=np.float32)
    w[np.arange(4), np.arange(4)] = 1
    assert np.array_equal(conv2d(Tensor4(x), Tensor4(w)).data, x)


def test_conv_first_layer_shape(rng):
    conv = Conv2d(3, 64, rng=rng)
    assert conv(Tensor4(np.zeros((1, 3, 64, 25)))).dims == (1, 64, 64, 25)


@pytest.mark.parametrize("cin,cout,k,stride,pad,groups", [
    (3, 4, (3, 3), 1, (1, 1), 1),
    (4, 6, (3, 1), 1, (1, 0), 2),
    (6, 6, (1, 1), 1, (0, 0), 3),
    (4, 2, (3, 3), 2, (1, 1), 1),
    (2, 4, (2, 3), 2, (0, 1), 2),
])
def test_conv_matches_nested_loops(cin, cout, k, stride, pad, groups, rng):
    x = rng.normal(size=(2, cin, 5, 4))
    w = rng.normal(size=(cout, cin // groups) + k)
    b = rng.normal(size=cout)
    out = conv2d(dbl(x), dbl(w), dbl(b.reshape(1, -1, 1, 1)), stride, pad, groups).data
    assert np.max(np.abs(out - conv2d_loops(x, w, b, stride, pad, groups))) < 1e-12


def test_grouped_conv_is_concat_of_slices(rng):
    x = rng.normal(size=(1, 6, 4, 3))
    w = rng.normal(size=(9, 2, 3, 1))
    full = conv2d(dbl(x), dbl(w), padding=(1, 0), groups=3).data
    parts = [conv2d(dbl(x[:, 2 * g:2 * g + 2]), dbl(w[3 * g:3 * g + 3]), padding=(1, 0)) for g in range(3)]
    assert np.allclose(full, concat(parts, 1).data, atol=1e-12)


def test_pointwise_conv_is_matmul(rng):
    x = rng.normal(size=(2, 5, 3, 4))
    w = rng.normal(size=(7, 5, 1, 1))
    expect = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x)
    assert np.allclose(conv2d(dbl(x), dbl(w)).data, expect, atol=1e-12)


def test_conv_errors(rng):
    x = Tensor4(np.zeros((1, 6, 4, 4)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor4(np.zeros((4, 5, 1, 1))))
    with pytest.raises((ShapeError, ConfigurationError)):
        conv2d(x, Tensor4(np.zeros((4, 2, 1, 1))), groups=4)
    with pytest.raises(ConfigurationError):
        Conv2d(6, 4, groups=4)


def test_conv_mac_tally(rng):
    conv = Conv2d(4, 6, kernel=3, groups=2, padding=1, rng=rng)
    with count_macs() as counter:
        conv(Tensor4(np.zeros((2, 4, 5, 3))))
    assert counter.total == 2 * 6 * 5 * 3 * 2 * 9


@pytest.mark.parametrize("groups,stride,pad", [(1, 1, 1), (2, 1, (1, 0)), (3, 2, 0)])
def test_conv_gradient(groups, stride, pad, rng):
    w = dbl(rng.normal(size=(6, 6 // groups, 3, 3)))
    b = dbl(rng.normal(size=(1, 6, 1, 1)))
    x = dbl(rng.normal(size=(2, 6, 5, 5)))
    f = lambda inp: reduce_sum(conv2d(x, inp, b, stride, pad, groups))  # noqa: E731
    assert finite_diff_check(lambda t: reduce_sum(conv2d(t, w, b, stride, pad, groups)), x) < 1e-4
    assert finite_diff_check(f, w) < 1e-4


def test_linear_and_gradient(rng):
    x = rng.normal(size=(3, 5, 1, 1))
    w = rng.normal(size=(4, 5, 1, 1))
    b = rng.normal(size=(1, 4, 1, 1))
    out = linear(dbl(x), dbl(w), dbl(b)).data[:, :, 0, 0]
    for n in range(3):
        for k in range(4):
            assert out[n, k] == pytest.approx(sum(w[k, f, 0, 0] * x[n, f, 0, 0] for f in range(5)) + b[0, k, 0, 0])
    assert finite_diff_check(lambda t: reduce_sum(linear(t, dbl(w), dbl(b))), dbl(x)) < 1e-10


# --- squeeze and excitation


def test_se_zero_weights_gate_half(rng):
    c = 4
    x = rng.normal(size=(2, c, 3, 3))
    z = dbl(np.zeros((c, c, 1, 1)))
    zb = dbl(np.zeros((1, c, 1, 1)))
    out, gate = se_attention(dbl(x), z, zb, z, zb)
    assert np.allclose(gate.data, 0.5)
    assert np.allclose(out.data, 0.5 * x)


def test_se_two_channel_closed_form():
    x = np.zeros((1, 2, 2, 2))
    x[0, 0] = 1.0
    x[0, 1] = 3.0
    w1 = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 2, 1, 1)
    w2 = np.array([[1.0, -1.0], [0.5, 0.5]]).reshape(2, 2, 1, 1)
    zb = dbl(np.zeros((1, 2, 1, 1)))
    _, gate = se_attention(dbl(x), dbl(w1), zb, dbl(w2), zb)
    sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
    assert gate.data.ravel().tolist() == pytest.approx([sig(1 - 3), sig(0.5 + 1.5)])


def test_se_gate_bounds_and_gradient(rng):
    se = SqueezeExcite(4, rng=rng).astype(np.float64)
    x = dbl(rng.normal(size=(2, 4, 3, 2)) * 5)
    se(x)
    assert se.last_gate.shape == (2, 4)
    assert np.all((se.last_gate > 0) & (se.last_gate < 1))
    assert finite_diff_check(lambda t: reduce_sum(se(t)), x) < 1e-4
    assert finite_diff_check(lambda t: reduce_sum(se(x)), se.fc1.weight) < 1e-4


def test_se_force_open(rng):
    se = SqueezeExcite(3, rng=rng)
    se.force_open = True
    x = Tensor4(rng.normal(size=(1, 3, 2, 2)))
    assert np.array_equal(se(x).data, x.data)


# --- batch norm


def test_batchnorm_train_normalizes(rng):
    bn = BatchNorm2d(3).astype(np.float64)
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 6))
    out = bn(dbl(x)).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batchnorm_eval_initial_buffers(rng):
    bn = BatchNorm2d(3).eval()
    x = rng.normal(size=(2, 3, 2, 2)).astype(np.float32)
    assert np.allclose(bn(Tensor4(x)).data, x / np.sqrt(1 + 1e-5), atol=1e-6)


def test_batchnorm_running_average(rng):
    bn = BatchNorm2d(2).astype(np.float64)
    rm, rv = np.zeros(2), np.ones(2)
    for _ in range(3):
        x = rng.normal(1.0, 3.0, size=(2, 2, 3, 3))
        bn(dbl(x))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        rm = 0.9 * rm + 0.1 * x.mean(axis=(0, 2, 3))
        rv = 0.9 * rv + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1)
    assert np.allclose(bn.running_mean, rm) and np.allclose(bn.running_var, rv)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient(training, rng):
    bn = BatchNorm2d(3).astype(np.float64)
    bn.gamma.data[:] = rng.normal(size=(1, 3, 1, 1))
    bn.running_var[:] = 2.0
    bn.train(training)
    x = dbl(rng.normal(size=(2, 3, 3, 2)))
    w = dbl(rng.normal(size=(2, 3, 3, 2)))
    f = lambda t: reduce_sum(bn(t) * w)  # noqa: E731
    assert finite_diff_check(f, x) < 1e-4
    assert finite_diff_check(lambda t: reduce_sum(bn(x) * w), bn.gamma) < 1e-4


# --- max pool


def test_maxpool_matches_loops(rng):
    x = rng.normal(size=(2, 3, 6, 4)).astype(np.float32)
    assert np.array_equal(maxpool2d(Tensor4(x)).data, maxpool_loops(x))


def test_maxpool_shapes():
    assert maxpool2d(Tensor4(np.zeros((1, 64, 64, 32)))).dims == (1, 64, 32, 16)
    assert maxpool2d(Tensor4(np.zeros((1, 64, 32, 16)))).dims == (1, 64, 16, 8)
    with pytest.raises(ShapeError):
        maxpool2d(Tensor4(np.zeros((1, 1, 3, 4))))
    assert maxpool2d(Tensor4(np.zeros((1, 1, 3, 5))), ceil_mode=True).dims == (1, 1, 2, 3)


def test_maxpool_ceil_mode_partial_window():
    x = np.arange(15, dtype=np.float64).reshape(1, 1, 3, 5) * -1
    out = maxpool2d(dbl(x), ceil_mode=True).data[0, 0]
    assert out[1, 2] == x[0, 0, 2, 4]


def test_maxpool_gradient(rng):
    x = dbl(rng.permutation(48).reshape(1, 3, 4, 4) * 0.1)
    w = dbl(rng.normal(size=(1, 3, 2, 2)))
    assert finite_diff_check(lambda t: reduce_sum(maxpool2d(t) * w), x) < 1e-6


# --- dropout


def test_dropout_eval_and_zero_p(rng):
    x = Tensor4(rng.normal(size=(1, 2, 3, 4)))
    assert dropout(x, 0.5, training=False) is x
    assert dropout(x, 0.0, training=True) is x
    with pytest.raises(ConfigurationError):
        Dropout(1.0)


def test_dropout_keep_rate_and_scaling():
    x = Tensor4(np.ones((1, 1, 1000, 1000)))
    out = dropout(x, 0.5, True, np.random.default_rng(0)).data
    kept = out != 0
    assert abs(kept.mean() - 0.5) < 0.01
    assert np.allclose(out[kept], 2.0)


# --- softmax cross entropy


def test_xent_known_values():
    z = dbl(np.array([0.0, 0.0]).reshape(1, 2, 1, 1))
    assert softmax_xent(z, [[1, 0]]).data.item() == pytest.approx(math.log(2))
    z = dbl(np.array([2.0, 1.0]).reshape(1, 2, 1, 1))
    expected = -(0.6 * math.log(math.e ** 2 / (math.e ** 2 + math.e)) + 0.4 * math.log(math.e / (math.e ** 2 + math.e)))
    assert softmax_xent(z, [[0.6, 0.4]]).data.item() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("k", [2, 5, 60])
def test_xent_uniform_logits_is_log_k(k):
    z = dbl(np.zeros((3, k, 1, 1)))
    t = np.eye(k)[[0, 1, 1]]
    assert softmax_xent(z, t).data.item() == pytest.approx(math.log(k), abs=1e-12)


def test_xent_rejects_bad_targets():
    z = dbl(np.zeros((1, 3, 1, 1)))
    with pytest.raises(InputError):
        softmax_xent(z, [[0.5, 0.4, 0.0]])
    with pytest.raises(InputError):
        softmax_xent(z, [[1.5, -0.5, 0.0]])


def test_xent_stable_for_large_logits():
    z = dbl(np.array([1000.0, -1000.0, 0.0]).reshape(1, 3, 1, 1))
    assert np.isfinite(softmax_xent(z, [[0, 1, 0]]).data.item())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_xent_gradient_rows_sum_to_zero(k, seed):
    r = np.random.default_rng(seed)
    t = r.dirichlet(np.ones(k), size=2)
    z = dbl(r.normal(size=(2, k, 1, 1)) * 3)
    err = finite_diff_check(lambda v: softmax_xent(v, t), z)
    assert err < 1e-6
    from tacnn.tensor import Tape, backward
    z.requires_grad = True
    z.grad = None
    with Tape() as tape:
        backward(softmax_xent(z, t), tape)
    assert np.allclose(z.grad.sum(axis=1), 0, atol=1e-12)
