"""numba kernels for the hot loops.  All arrays are channels-last (NHWC).

``conv_forward`` accumulates every output element sequentially over
(in_channel, kernel_row, kernel_col) starting from 0 and adds the bias last;
it is compiled without fastmath so that order is preserved bit-for-bit.
Convolution gradients have no ordering contract and go through BLAS (see
``layers.Conv2d.backward``).
"""
import numpy as np
from numba import njit


@njit(cache=True, boundscheck=False, nogil=True)
def conv_forward(x, wt, b, stride):
    # x [N,H,W,C]; wt [C,KH,KW,O]; b [O]
    N, H, W, C = x.shape
    _, KH, KW, O = wt.shape
    Ho = (H - KH) // stride + 1
    Wo = (W - KW) // stride + 1
    out = np.empty((N, Ho, Wo, O), dtype=x.dtype)
    acc = np.empty((Wo, O), dtype=x.dtype)
    for n in range(N):
        for i in range(Ho):
            acc[:, :] = 0
            for c in range(C):
                for p in range(KH):
                    for q in range(KW):
                        wr = wt[c, p, q]
                        for j in range(Wo):
                            xv = x[n, i * stride + p, j * stride + q, c]
                            for o in range(O):
                                acc[j, o] += wr[o] * xv
            for j in range(Wo):
                for o in range(O):
                    out[n, i, j, o] = acc[j, o] + b[o]
    return out


@njit(cache=True, boundscheck=False, nogil=True)
def maxpool2_forward(x):
    # floor pooling: an odd trailing row/column is dropped
    N, H, W, C = x.shape
    Ho = H // 2
    Wo = W // 2
    out = np.empty((N, Ho, Wo, C), dtype=x.dtype)
    arg = np.empty((N, Ho, Wo, C), dtype=np.uint8)
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    best = x[n, 2 * i, 2 * j, c]
                    k = 0
                    v = x[n, 2 * i, 2 * j + 1, c]
                    if v > best:
                        best = v
                        k = 1
                    v = x[n, 2 * i + 1, 2 * j, c]
                    if v > best:
                        best = v
                        k = 2
                    v = x[n, 2 * i + 1, 2 * j + 1, c]
                    if v > best:
                        best = v
                        k = 3
                    out[n, i, j, c] = best
                    arg[n, i, j, c] = k
    return out, arg


@njit(cache=True, boundscheck=False, nogil=True)
def maxpool2_backward(dy, arg, H, W):
    N, Ho, Wo, C = dy.shape
    dx = np.zeros((N, H, W, C), dtype=dy.dtype)
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    k = arg[n, i, j, c]
                    dx[n, 2 * i + k // 2, 2 * j + k % 2, c] = dy[n, i, j, c]
    return dx


@njit(cache=True, boundscheck=False, nogil=True)
def bn_train_forward(x, gamma, beta, eps):
    # x [M, C]; statistics accumulate in float64
    M, C = x.shape
    mean = np.zeros(C)
    var = np.zeros(C)
    for m in range(M):
        for c in range(C):
            mean[c] += x[m, c]
    mean /= M
    for m in range(M):
        for c in range(C):
            d = x[m, c] - mean[c]
            var[c] += d * d
    var /= M
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mu = mean.astype(x.dtype)
    xhat = np.empty_like(x)
    y = np.empty_like(x)
    for m in range(M):
        for c in range(C):
            h = (x[m, c] - mu[c]) * inv[c]
            xhat[m, c] = h
            y[m, c] = h * gamma[c] + beta[c]
    return y, xhat, mean, var, inv


@njit(cache=True, boundscheck=False, nogil=True)
def bn_train_backward(dy, xhat, gamma, inv):
    M, C = dy.shape
    sdy = np.zeros(C)
    sdx = np.zeros(C)
    for m in range(M):
        for c in range(C):
            sdy[c] += dy[m, c]
            sdx[c] += dy[m, c] * xhat[m, c]
    k = (gamma * inv / M).astype(dy.dtype)
    a = sdy.astype(dy.dtype)
    b = sdx.astype(dy.dtype)
    dx = np.empty_like(dy)
    for m in range(M):
        for c in range(C):
            dx[m, c] = k[c] * (M * dy[m, c] - a[c] - xhat[m, c] * b[c])
    return dx, b, a


@njit(cache=True, boundscheck=False, nogil=True)
def relu_forward(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for k in range(flat.size):
        v = flat[k]
        out[k] = v if v > 0 else 0
    return out.reshape(x.shape)


@njit(cache=True, boundscheck=False, nogil=True)
def relu_backward(dy, y):
    g = dy.ravel()
    f = y.ravel()
    out = np.empty_like(g)
    for k in range(g.size):
        out[k] = g[k] if f[k] > 0 else 0
    return out.reshape(dy.shape)
