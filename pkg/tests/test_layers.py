import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from echoqa.layers import (
    LSTM, BackwardBeforeForward, BatchNorm, Conv2d, Dense, Dropout, MaxPool2x2, ReLU, Sigmoid,
    batchnorm_forward, conv2d_forward, dropout_forward, lstm_forward, maxpool2x2_forward,
    relu_forward, sigmoid, sigmoid_forward,
)
from echoqa.tensor import SeededRng

import gradcheck
from oracles import brute_conv


def make_conv(c_in, c_out, seed, dtype=np.float32, stride=1):
    conv = Conv2d(c_in, c_out, 3, stride=stride, rng=SeededRng(seed), dtype=dtype)
    conv.params["bias"][:] = SeededRng(seed).child(9).normal(c_out).astype(dtype)
    return conv


# convolution

def test_conv_sum_of_ones():
    conv = Conv2d(1, 1, 3)
    conv.params["kernels"][:] = 1
    out = conv2d_forward(conv, np.ones((1, 1, 3, 3), np.float32))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9


def test_conv_delta_kernel_crops():
    conv = Conv2d(1, 1, 3)
    conv.params["kernels"][0, 0, 1, 1] = 1
    x = np.random.default_rng(0).random((2, 1, 7, 9)).astype(np.float32)
    np.testing.assert_array_equal(conv2d_forward(conv, x), x[:, :, 1:-1, 1:-1])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv_matches_brute_force_bitwise(dtype):
    rng = np.random.default_rng(1)
    for trial in range(10):
        n, c_in, c_out = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        h, w = rng.integers(3, 17, size=2)
        stride = int(rng.integers(1, 3))
        conv = make_conv(c_in, c_out, trial, dtype, stride)
        x = rng.standard_normal((n, c_in, h, w)).astype(dtype)
        got = conv2d_forward(conv, x)
        want = brute_conv(x, conv.params["kernels"], conv.params["bias"], stride)
        assert got.tobytes() == want.tobytes()


def test_conv_output_size_and_errors():
    conv = Conv2d(2, 3, 3, stride=2)
    assert conv.output_size(9, 10) == (4, 4)
    with pytest.raises(ValueError):
        conv2d_forward(conv, np.zeros((1, 1, 8, 8), np.float32))
    with pytest.raises(ValueError):
        conv2d_forward(conv, np.zeros((1, 2, 2, 8), np.float32))


# elementwise activations

def test_relu_examples():
    np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    layer = ReLU()
    layer.forward(np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(layer.backward(np.array([[1.0, 1.0]])), [[0, 1]])


def test_relu_subgradient_at_zero_is_zero():
    layer = ReLU()
    layer.forward(np.zeros((1, 3)))
    np.testing.assert_array_equal(layer.backward(np.ones((1, 3))), 0)


def test_sigmoid_examples():
    assert sigmoid_forward(np.float64(0)) == 0.5
    layer = Sigmoid()
    layer.forward(np.zeros(1))
    assert layer.backward(np.ones(1))[0] == 0.25
    assert sigmoid(np.float64(50.0)) < 1.0
    assert sigmoid(np.float64(50.0)) > 1 - 1e-15


@given(arrays(np.float64, 8, elements=st.floats(-1e6, 1e6)))
def test_sigmoid_strictly_inside_unit_interval(x):
    for dt in (np.float32, np.float64):
        s = sigmoid(x.astype(dt))
        assert np.all(np.isfinite(s)) and np.all(s > 0) and np.all(s < 1)


@given(arrays(np.float64, 6, elements=st.floats(-30, 30)))
def test_sigmoid_symmetry(x):
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, rtol=0, atol=1e-15)


# batch norm

def test_batchnorm_gamma_zero_gives_beta():
    bn = BatchNorm(3, dtype=np.float64)
    bn.params["gamma"][:] = 0
    bn.params["beta"][:] = [1.0, -2.0, 0.5]
    x = np.random.default_rng(0).standard_normal((4, 3, 5, 5))
    y = batchnorm_forward(bn, x, mode="train")
    np.testing.assert_array_equal(y, np.broadcast_to(bn.params["beta"][None, :, None, None], y.shape))


def test_batchnorm_normalizes_batch_statistics():
    bn = BatchNorm(4, dtype=np.float64)
    x = np.random.default_rng(3).normal(2.0, 3.0, (8, 4, 6, 6))
    y = batchnorm_forward(bn, x, mode="train")
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    # biased variance of the output is var / (var + eps)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_fixed_point():
    bn = BatchNorm(1, dtype=np.float64)
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(4, 1)
    y = bn.forward(x, train=True)
    np.testing.assert_allclose(y, x, atol=1e-5)


def test_batchnorm_running_stats_and_errors():
    bn = BatchNorm(2, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((5, 2))
    bn.forward(x, train=True)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    with pytest.raises(ValueError):
        bn.forward(x[:1], train=True)


def test_batchnorm_infer_is_pure():
    bn = BatchNorm(3, dtype=np.float64)
    bn.running_mean[:] = [0.1, 0.2, 0.3]
    bn.running_var[:] = [1.5, 0.5, 2.0]
    x = np.random.default_rng(1).standard_normal((2, 3))
    before = (bn.running_mean.copy(), bn.running_var.copy())
    a = bn.forward(x)
    b = bn.forward(x)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(bn.running_mean, before[0])
    np.testing.assert_allclose(a, (x - before[0]) / np.sqrt(before[1] + 1e-5))


# pooling

def test_maxpool_examples():
    out, arg = maxpool2x2_forward(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert out.shape == (1, 1) and out[0, 0] == 4 and arg[0, 0] == 3
    const = np.full((4, 6), 7.0)
    np.testing.assert_array_equal(maxpool2x2_forward(const)[0], np.full((2, 3), 7.0))


def test_maxpool_monotone_raster_picks_bottom_right():
    x = np.arange(6 * 8, dtype=np.float64).reshape(6, 8)
    out, arg = maxpool2x2_forward(x)
    np.testing.assert_array_equal(out, x[1::2, 1::2])
    assert np.all(arg == 3)


def test_maxpool_odd_sizes_floor_and_first_max_wins():
    x = np.zeros((5, 5))
    out, arg = maxpool2x2_forward(x)
    assert out.shape == (2, 2) and np.all(arg == 0)
    with pytest.raises(ValueError):
        maxpool2x2_forward(np.zeros((1, 5)))


def test_maxpool_backward_routes_to_argmax():
    layer = MaxPool2x2()
    x = np.array([[1.0, 5.0, 0.0], [2.0, 3.0, 9.0], [4.0, 4.0, 4.0]]).reshape(1, 3, 3, 1)
    layer.forward(x)
    dx = layer.backward(np.full((1, 1, 1, 1), 2.0))
    expected = np.zeros((3, 3))
    expected[0, 1] = 2.0
    np.testing.assert_array_equal(dx[0, :, :, 0], expected)


# dropout

def test_dropout_identity_cases():
    x = np.random.default_rng(0).random((3, 4))
    assert dropout_forward(x, 0.0, SeededRng(1), "train") is x
    assert dropout_forward(x, 0.7, None, "infer") is x
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_dropout_survivor_fraction():
    y = dropout_forward(np.ones(10_000, np.float32), 0.5, SeededRng(3), "train")
    frac = np.count_nonzero(y) / y.size
    assert 0.45 <= frac <= 0.55
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_dropout_preserves_expectation():
    x = np.full(64, 0.3, np.float32)
    total = np.zeros(64)
    for k in range(1000):
        total += dropout_forward(x, 0.5, SeededRng(11).child(k), "train")
    assert abs(total.mean() / 1000 - 0.3) <= 0.02 * 0.3


# dense and lstm

def test_dense_forward():
    d = Dense(2, 1)
    d.params["weights"][:] = [[5.0, 6.0]]
    d.params["bias"][:] = 1.0
    np.testing.assert_array_equal(d.forward(np.array([[1.0, 2.0]], np.float32)), [[18.0]])


def test_lstm_zero_weights_gives_zero():
    layer = LSTM(5, 3)
    out = lstm_forward(layer, np.random.default_rng(0).random((1, 2, 5)).astype(np.float32))
    np.testing.assert_array_equal(out, 0)


def _ref_sigmoid(z):
    return 1 / (1 + np.exp(-z))


def test_lstm_closed_form_with_zero_recurrence():
    layer = LSTM(3, 2, rng=SeededRng(4), dtype=np.float64)
    layer.params["w_recurrent"][:] = 0
    x = np.array([0.5, -1.0, 2.0])
    seq = np.tile(x, (3, 1, 1))
    z = x @ layer.params["w_input"] + layer.params["bias"]
    i, f, g, o = (_ref_sigmoid(z[0:2]), _ref_sigmoid(z[2:4]), np.tanh(z[4:6]), _ref_sigmoid(z[6:8]))
    c = np.zeros(2)
    for _ in range(3):
        c = f * c + i * g
    np.testing.assert_allclose(lstm_forward(layer, seq)[0], o * np.tanh(c), rtol=1e-13)


def test_lstm_deterministic_and_errors():
    layer = LSTM(4, 3, rng=SeededRng(2))
    seq = np.random.default_rng(0).random((3, 2, 4)).astype(np.float32)
    assert lstm_forward(layer, seq).tobytes() == lstm_forward(layer, seq.copy()).tobytes()
    with pytest.raises(ValueError):
        lstm_forward(layer, np.zeros((0, 2, 4), np.float32))


def test_backward_before_forward_raises():
    for layer in (Conv2d(1, 1), BatchNorm(1), ReLU(), Sigmoid(), MaxPool2x2(), Dropout(0.5),
                  Dense(1, 1), LSTM(1, 1)):
        with pytest.raises(BackwardBeforeForward):
            layer.backward(np.zeros((1, 1)))


# finite differences, float64

def assert_grads(layer, x, train=False):
    worst = max(gradcheck.layer_check(layer, x, train), key=lambda t: t[4])
    assert worst[4] < 1e-4, worst

def test_gradcheck_conv():
    x = np.random.default_rng(0).standard_normal((2, 7, 6, 3))
    assert_grads(Conv2d(3, 4, rng=SeededRng(1), dtype=np.float64), x)
    assert_grads(Conv2d(3, 2, stride=2, rng=SeededRng(2), dtype=np.float64), x)


def test_gradcheck_batchnorm_train_and_infer():
    x = np.random.default_rng(1).standard_normal((3, 4, 4, 5)) * 2 + 1
    bn = BatchNorm(5, dtype=np.float64)
    bn.params["gamma"][:] = np.linspace(0.5, 2, 5)
    bn.params["beta"][:] = np.linspace(-1, 1, 5)
    assert_grads(bn, x, train=True)
    bn.running_var[:] = np.linspace(0.5, 3, 5)
    assert_grads(bn, x, train=False)


def test_gradcheck_relu_away_from_zero():
    x = np.random.default_rng(2).standard_normal((4, 6))
    x[np.abs(x) < 1e-2] = 0.5
    assert_grads(ReLU(), x)


def test_gradcheck_sigmoid_dense_dropout():
    rng = np.random.default_rng(3)
    assert_grads(Sigmoid(), rng.standard_normal((3, 5)) * 3)
    assert_grads(Dense(6, 4, rng=SeededRng(3), dtype=np.float64), rng.standard_normal((5, 6)))
    assert_grads(Dropout(0.5), rng.standard_normal((4, 8)), train=True)


def test_gradcheck_maxpool():
    x = np.random.default_rng(4).permutation(2 * 6 * 7 * 3).reshape(2, 6, 7, 3).astype(np.float64) * 0.01
    assert_grads(MaxPool2x2(), x)


def test_gradcheck_lstm():
    layer = LSTM(5, 4, rng=SeededRng(5), dtype=np.float64)
    layer.params["bias"][:] += np.random.default_rng(5).standard_normal(16) * 0.3
    assert_grads(layer, np.random.default_rng(6).standard_normal((3, 2, 5)))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.integers(0, 2**32 - 1))
def test_conv_bitwise_property(c_in, c_out, h, w, seed):
    conv = make_conv(c_in, c_out, seed % 1000)
    x = np.random.default_rng(seed).standard_normal((1, c_in, h, w)).astype(np.float32)
    got = conv2d_forward(conv, x)
    assert got.tobytes() == brute_conv(x, conv.params["kernels"], conv.params["bias"]).tobytes()
