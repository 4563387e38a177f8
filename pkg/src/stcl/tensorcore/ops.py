"""Differentiable operations.

Every op takes tensors (or array-likes, promoted to constants), computes its
forward value with numpy and records a closure returning one gradient per
input. Leading batch axes are supported wherever the math allows it.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stcl.errors import ConfigError, DimensionError
from stcl.tensorcore.tensor import Tensor, as_tensor, make_result

LN_EPS = 1e-5


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw)


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0.0), (x,), bw)


def dropout(x, rate, rng=None, train=False):
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an explicit random stream")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), bw)


def concat_last(tensors):
    tensors = [as_tensor(t) for t in tensors]
    widths = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, widths, axis=-1))

    return make_result(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), bw)


def reshape(x, shape):
    x = as_tensor(x)

    def bw(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), bw)


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return make_result(np.transpose(x.data, axes), (x,), bw)


def getitem(x, index):
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(x.data[index], (x,), bw)


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_last(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), bw)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gy = g * gamma.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        return gx, gg, gb

    return make_result(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def _conv1d(x, kernel, bias, left, right):
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 3 or x.shape[-1] != kernel.shape[1] or bias.shape != (kernel.shape[2],):
        raise DimensionError(
            f"conv1d shape mismatch: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    k, din, dout = kernel.shape
    T = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad)
    # windows[..., t, j, c] = xp[..., t + j, c]
    windows = np.swapaxes(sliding_window_view(xp, k, axis=-2), -1, -2)
    cols = windows.reshape(*x.shape[:-2], T, k * din)
    w2 = kernel.data.reshape(k * din, dout)
    out = cols @ w2 + bias.data

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(*x.shape[:-2], T, k, din)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + T, :] += gcols[..., j, :]
            gx = gxp[..., left:left + T, :]
        if kernel.requires_grad:
            flat_cols = cols.reshape(-1, k * din)
            gk = (flat_cols.T @ g.reshape(-1, dout)).reshape(k, din, dout)
        if bias.requires_grad:
            gb = g.reshape(-1, dout).sum(axis=0)
        return gx, gk, gb

    return make_result(out, (x, kernel, bias), bw)


def conv1d_same(x, kernel, bias):
    """Centered temporal convolution, zero-padded so the output keeps length T.

    ``x`` is ``[..., T, Din]``, ``kernel`` is ``[k, Din, Dout]`` with odd ``k``;
    tap ``j`` reads ``x[t + j - (k - 1) // 2]``.
    """
    k = as_tensor(kernel).shape[0]
    if k % 2 == 0:
        raise ConfigError(f"same-padded convolution needs an odd kernel size, got {k}")
    half = (k - 1) // 2
    return _conv1d(x, kernel, bias, half, half)


def conv1d_causal(x, kernel, bias):
    """Left-padded temporal convolution: output ``t`` reads ``x[t-k+1 .. t]`` only."""
    k = as_tensor(kernel).shape[0]
    if k < 1:
        raise ConfigError("causal convolution needs k >= 1")
    return _conv1d(x, kernel, bias, k - 1, 0)


def mse_mean(yhat, y):
    yhat, y = as_tensor(yhat), as_tensor(y)
    if yhat.shape != y.shape:
        raise DimensionError(f"mse_mean shape mismatch: {yhat.shape} vs {y.shape}")
    d = yhat.data - y.data
    n = d.size

    def bw(g):
        s = g * (2.0 / n) * d
        return s, -s

    return make_result(np.array((d * d).sum() / n), (yhat, y), bw)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def scale(x, c):
    return mul(x, float(c))


__all__ = [
    "Tensor", "add", "sub", "mul", "matmul", "relu", "dropout", "concat_last",
    "reshape", "transpose", "getitem", "sum", "mean", "softmax_last", "layer_norm",
    "conv1d_same", "conv1d_causal", "mse_mean", "linear", "scale",
]
