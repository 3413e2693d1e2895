"""Forward and backward kernels for the fixed layer set.

Activations are channels-last: ``(N, H, W, C)`` for spatial layers and
``(N, D)`` after ``flatten``.  Every forward returns ``(y, cache)``; every
backward takes ``(dy, cache, params)`` and returns ``(dx, grads)`` where
``grads`` mirrors the keys of ``params``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _windows(x):
    """3x3 neighbourhoods of a same-padded input, shape (N, H, W, C, 3, 3)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return sliding_window_view(xp, (3, 3), axis=(1, 2))


def conv_forward(x, p):
    # W: (3, 3, C_in, C_out)
    win = _windows(x)
    y = np.tensordot(win, p["W"], axes=([4, 5, 3], [0, 1, 2])) + p["b"]
    return y, x


def conv_backward(dy, x, p):
    win = _windows(x)
    dW = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2]))  # (C_in, 3, 3, C_out)
    dW = dW.transpose(1, 2, 0, 3)
    db = dy.sum(axis=(0, 1, 2))
    # full correlation of dy with the flipped kernel
    wflip = p["W"][::-1, ::-1].transpose(0, 1, 3, 2)  # (3, 3, C_out, C_in)
    dx = np.tensordot(_windows(dy), wflip, axes=([4, 5, 3], [0, 1, 2]))
    return dx, {"W": dW, "b": db}


def pool_forward(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, : 2 * h2, : 2 * w2, :]
    blocks = xc.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    # first maximum wins (row-major within the window)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg)


def pool_backward(dy, cache):
    shape, arg = cache
    n, h, w, c = shape
    h2, w2 = h // 2, w // 2
    onehot = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(onehot, arg[..., None], dy[..., None], axis=-1)
    blocks = onehot.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    dx = np.zeros(shape)
    dx[:, : 2 * h2, : 2 * w2, :] = blocks
    return dx


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, positive):
    return dy * positive


def dense_forward(x, p):
    return x @ p["W"] + p["b"], x


def dense_backward(dy, x, p):
    return dy @ p["W"].T, {"W": x.T @ dy, "b": dy.sum(axis=0)}


def dropout_forward(x, rate, rng):
    if rate <= 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return x * scale, scale


def dropout_backward(dy, scale):
    return dy if scale is None else dy * scale


def batchnorm_forward(x, p, buf, train: bool):
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = buf["running_mean"], buf["running_var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    y = p["gamma"] * xhat + p["beta"]
    return y, (xhat, inv, mean, var, train)


def batchnorm_backward(dy, cache, p):
    xhat, inv, _, _, train = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * p["gamma"]
    if not train:
        return dxhat * inv, {"gamma": dgamma, "beta": dbeta}
    m = dy.size // dy.shape[-1]
    dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, {"gamma": dgamma, "beta": dbeta}


def update_running_stats(buf, cache, momentum=BN_MOMENTUM):
    _, _, mean, var, train = cache
    if train:
        buf["running_mean"] = momentum * buf["running_mean"] + (1 - momentum) * mean
        buf["running_var"] = momentum * buf["running_var"] + (1 - momentum) * var


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
