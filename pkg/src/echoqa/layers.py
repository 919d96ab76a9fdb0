"""Differentiable layers with explicit forward/backward passes.

Every layer keeps its trainable arrays in ``params`` and, after
``backward``, the matching gradients in ``grads`` (same keys, same shapes).
Spatial layers work on channels-last arrays ``[N, H, W, C]``; the
module-level ``*_forward`` helpers expose the channels-first
``[N, C, H, W]`` convention used at the package boundary.
"""
from __future__ import annotations

import math

import numpy as np

from . import _kernels as K
from .tensor import DEFAULT_DTYPE, SeededRng, randn


class BackwardBeforeForward(RuntimeError):
    pass


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def buffers(self) -> dict:
        """Non-trainable state that must be checkpointed."""
        return {}

    def _take_cache(self):
        if self._cache is None:
            raise BackwardBeforeForward(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Conv2d(Layer):
    """Valid-padding 2-D convolution; kernels stored as [out, in, kh, kw]."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 rng: SeededRng | None = None, dtype=DEFAULT_DTYPE, scale=1.0):
        super().__init__()
        if stride < 1:
            raise ValueError("stride must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = randn(shape, rng, stddev=scale * math.sqrt(2.0 / fan_in), dtype=dtype)
        self.params = {"kernels": w, "bias": np.zeros(out_channels, dtype=dtype)}
        self.need_input_grad = True

    def output_size(self, h, w):
        return (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1

    def _wt(self):
        return np.ascontiguousarray(self.params["kernels"].transpose(1, 2, 3, 0))

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ValueError(f"expected [N,H,W,{self.in_channels}] input, got {x.shape}")
        if x.shape[1] < self.k or x.shape[2] < self.k:
            raise ValueError(f"input {x.shape[1]}x{x.shape[2]} smaller than kernel {self.k}")
        x = np.ascontiguousarray(x)
        self._cache = x
        return K.conv_forward(x, self._wt(), self.params["bias"], self.stride)

    def _tap(self, p, q, ho, wo):
        s = self.stride
        return (slice(None), slice(p, p + s * (ho - 1) + 1, s), slice(q, q + s * (wo - 1) + 1, s))

    def backward(self, dy):
        # one GEMM per kernel tap on the shifted input window
        x = self._take_cache()
        n, ho, wo, o = dy.shape
        g = np.ascontiguousarray(dy).reshape(-1, o)
        w = self.params["kernels"]
        dw = np.empty_like(w)
        for p in range(self.k):
            for q in range(self.k):
                xs = np.ascontiguousarray(x[self._tap(p, q, ho, wo)]).reshape(-1, self.in_channels)
                dw[:, :, p, q] = g.T @ xs
        self.grads = {"kernels": dw,
                      "bias": g.sum(axis=0, dtype=np.float64).astype(dy.dtype)}
        if not self.need_input_grad:
            return None
        taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # contiguous [O, C] per tap for BLAS
        dx = np.zeros_like(x)
        for p in range(self.k):
            for q in range(self.k):
                dx[self._tap(p, q, ho, wo)] += (g @ taps[p, q]).reshape(n, ho, wo, self.in_channels)
        return dx


class BatchNorm(Layer):
    """Normalizes over every axis except the last (the feature/channel axis)."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=DEFAULT_DTYPE):
        super().__init__()
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.eps = eps
        self.momentum = momentum
        self.params = {"gamma": np.ones(channels, dtype=dtype),
                       "beta": np.zeros(channels, dtype=dtype)}
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False, rng=None):
        gamma, beta = self.params["gamma"], self.params["beta"]
        c = x.shape[-1]
        flat = x.reshape(-1, c)
        if not train:
            inv = (1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)).astype(x.dtype)
            xhat = (x - self.running_mean) * inv
            self._cache = ("infer", xhat, inv)
            return xhat * gamma + beta
        if x.shape[0] < 2:
            raise ValueError("batch normalization in train mode needs a batch of at least 2")
        m = flat.shape[0]
        y, xhat, mean, var, inv = K.bn_train_forward(np.ascontiguousarray(flat), gamma, beta, self.eps)
        mom = self.momentum
        self.running_mean[:] = (1 - mom) * self.running_mean + mom * mean
        self.running_var[:] = (1 - mom) * self.running_var + mom * var * (m / (m - 1))
        self._cache = ("train", xhat, inv)
        return y.reshape(x.shape)

    def backward(self, dy):
        cache = self._take_cache()
        gamma = self.params["gamma"]
        c = dy.shape[-1]
        mode, xhat, inv = cache
        if mode == "infer":
            g = dy.reshape(-1, c)
            self.grads = {"gamma": (g * xhat.reshape(-1, c)).sum(axis=0), "beta": g.sum(axis=0)}
            return dy * (inv * gamma)
        dx, dgamma, dbeta = K.bn_train_backward(np.ascontiguousarray(dy).reshape(-1, c), xhat, gamma, inv)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        return dx.reshape(dy.shape)


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        y = K.relu_forward(np.ascontiguousarray(x))
        self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        # subgradient at 0 is 0: y > 0 exactly where x > 0
        return K.relu_backward(np.ascontiguousarray(dy), y)


def sigmoid(x):
    """Logistic function, clamped to [epsneg, 1 - epsneg].

    ``0.5 * (1 + tanh(x / 2))`` never overflows; the clamp keeps results
    strictly inside the open interval even where the exact value rounds to
    0 or 1.
    """
    x = np.asarray(x)
    dt = x.dtype if x.dtype.kind == "f" else np.dtype(np.float64)
    half = dt.type(0.5)
    s = half * (dt.type(1) + np.tanh(x.astype(dt, copy=False) * half))
    eps = np.finfo(dt).epsneg
    return np.clip(s, eps, 1 - eps)


class Sigmoid(Layer):
    def forward(self, x, train=False, rng=None):
        s = sigmoid(x)
        self._cache = s
        return s

    def backward(self, dy):
        s = self._take_cache()
        return dy * s * (1 - s)


class MaxPool2x2(Layer):
    def forward(self, x, train=False, rng=None):
        if x.shape[1] < 2 or x.shape[2] < 2:
            raise ValueError(f"max pooling needs spatial dims >= 2, got {x.shape[1:3]}")
        out, arg = K.maxpool2_forward(np.ascontiguousarray(x))
        self._cache = (arg, x.shape[1], x.shape[2])
        return out

    def backward(self, dy):
        arg, h, w = self._take_cache()
        return K.maxpool2_backward(np.ascontiguousarray(dy), arg, h, w)


_IDENTITY = object()


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""

    def __init__(self, p=0.5):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0:
            self._cache = _IDENTITY
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.gen.random(x.shape, dtype=np.float32) >= self.p
        mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.p))
        self._cache = mask
        return x * mask

    def backward(self, dy):
        mask = self._take_cache()
        return dy if mask is _IDENTITY else dy * mask


class Dense(Layer):
    """y = x W^T + b with W stored as [out, in]."""

    def __init__(self, in_features, out_features, rng: SeededRng | None = None,
                 dtype=DEFAULT_DTYPE, gain=2.0):
        super().__init__()
        shape = (out_features, in_features)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = randn(shape, rng, stddev=math.sqrt(gain / in_features), dtype=dtype)
        self.params = {"weights": w, "bias": np.zeros(out_features, dtype=dtype)}

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.params["weights"].shape[1]:
            raise ValueError(f"expected [N,{self.params['weights'].shape[1]}] input, got {x.shape}")
        self._cache = x
        return x @ self.params["weights"].T + self.params["bias"]

    def backward(self, dy):
        x = self._take_cache()
        self.grads = {"weights": dy.T @ x, "bias": dy.sum(axis=0)}
        return dy @ self.params["weights"]


class LSTM(Layer):
    """Single-layer LSTM returning the final hidden state.

    Gate blocks along the 4*hidden axis are ordered (input, forget, cell,
    output).  Weights ~ N(0, 1/fan_in); the forget-gate bias starts at 1.
    """

    def __init__(self, input_size, hidden_size, rng: SeededRng | None = None,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        n = hidden_size
        self.input_size = input_size
        self.hidden_size = n
        if rng is None:
            wx = np.zeros((input_size, 4 * n), dtype=dtype)
            wh = np.zeros((n, 4 * n), dtype=dtype)
        else:
            wx = randn((input_size, 4 * n), rng.child(0), stddev=1 / math.sqrt(input_size), dtype=dtype)
            wh = randn((n, 4 * n), rng.child(1), stddev=1 / math.sqrt(n), dtype=dtype)
        b = np.zeros(4 * n, dtype=dtype)
        if rng is not None:
            b[n:2 * n] = 1
        self.params = {"w_input": wx, "w_recurrent": wh, "bias": b}

    def forward(self, seq, train=False, rng=None):
        if seq.ndim != 3 or seq.shape[0] < 1:
            raise ValueError("LSTM expects a non-empty [T, batch, features] sequence")
        T, B, F = seq.shape
        if F != self.input_size:
            raise ValueError(f"expected {self.input_size} features, got {F}")
        n = self.hidden_size
        wx, wh, b = self.params["w_input"], self.params["w_recurrent"], self.params["bias"]
        zx = (seq.reshape(T * B, F) @ wx).reshape(T, B, 4 * n)
        h = np.zeros((B, n), dtype=seq.dtype)
        c = np.zeros((B, n), dtype=seq.dtype)
        hs, cs, gates = [h], [c], []
        for t in range(T):
            z = zx[t] + h @ wh + b
            i = sigmoid(z[:, :n])
            f = sigmoid(z[:, n:2 * n])
            g = np.tanh(z[:, 2 * n:3 * n])
            o = sigmoid(z[:, 3 * n:])
            c = f * c + i * g
            h = o * np.tanh(c)
            gates.append((i, f, g, o))
            hs.append(h)
            cs.append(c)
        self._cache = (seq, hs, cs, gates)
        return h

    def backward(self, dh):
        seq, hs, cs, gates = self._take_cache()
        T, B, F = seq.shape
        n = self.hidden_size
        wx, wh = self.params["w_input"], self.params["w_recurrent"]
        dwh = np.zeros_like(wh)
        db = np.zeros_like(self.params["bias"])
        dz_all = np.empty((T, B, 4 * n), dtype=seq.dtype)
        dc = np.zeros((B, n), dtype=seq.dtype)
        dh = dh.astype(seq.dtype, copy=True)
        for t in reversed(range(T)):
            i, f, g, o = gates[t]
            tc = np.tanh(cs[t + 1])
            do = dh * tc
            dc = dc + dh * o * (1 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * cs[t]
            dz = dz_all[t]
            dz[:, :n] = di * i * (1 - i)
            dz[:, n:2 * n] = df * f * (1 - f)
            dz[:, 2 * n:3 * n] = dg * (1 - g * g)
            dz[:, 3 * n:] = do * o * (1 - o)
            dwh += hs[t].T @ dz
            db += dz.sum(axis=0)
            dh = dz @ wh.T
            dc = dc * f
        flat_dz = dz_all.reshape(T * B, 4 * n)
        dwx = seq.reshape(T * B, F).T @ flat_dz
        self.grads = {"w_input": dwx, "w_recurrent": dwh, "bias": db}
        return (flat_dz @ wx.T).reshape(T, B, F)


# channels-first functional helpers

def _nchw_to_nhwc(x):
    return np.ascontiguousarray(np.moveaxis(x, 1, -1))


def _nhwc_to_nchw(x):
    return np.ascontiguousarray(np.moveaxis(x, -1, 1))


def conv2d_forward(layer: Conv2d, x):
    """Convolve an [N, C_in, H, W] batch; returns [N, C_out, H', W']."""
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ValueError(f"expected [N,{layer.in_channels},H,W] input, got {x.shape}")
    return _nhwc_to_nchw(layer.forward(_nchw_to_nhwc(x)))


def relu_forward(x):
    x = np.asarray(x)
    return np.where(x > 0, x, x.dtype.type(0))


def sigmoid_forward(x):
    return sigmoid(x)


def batchnorm_forward(layer: BatchNorm, x, mode="infer"):
    """Normalize [N, C, ...] per channel (axis 1)."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    moved = np.moveaxis(np.asarray(x), 1, -1)
    y = layer.forward(np.ascontiguousarray(moved), train=(mode == "train"))
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def maxpool2x2_forward(x):
    """2x2/stride-2 max pooling over the last two axes.

    Returns ``(pooled, argmax)`` where argmax holds the window position
    (0..3, row-major) of each maximum.
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError("need at least two axes")
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"max pooling needs spatial dims >= 2, got {(h, w)}")
    nhwc = np.ascontiguousarray(x.reshape((-1, h, w))[..., None])
    out, arg = K.maxpool2_forward(nhwc)
    return out[..., 0].reshape(lead + out.shape[1:3]), arg[..., 0].reshape(lead + out.shape[1:3])


def dropout_forward(x, p, rng: SeededRng | None = None, mode="infer"):
    return Dropout(p).forward(np.asarray(x), train=(mode == "train"), rng=rng)


def lstm_forward(layer: LSTM, seq):
    return layer.forward(np.asarray(seq))
