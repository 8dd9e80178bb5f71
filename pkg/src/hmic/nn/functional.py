"""Batched forward/backward kernels. Arrays carry a leading batch axis."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .layers import DimensionError

PROB_FLOOR = 1e-12


def sigmoid(x):
    # tanh form never overflows, unlike 1 / (1 + exp(-x)) in float32
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def activate(name: str, z):
    if name == "relu":
        return np.maximum(z, 0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, z, a, upstream):
    """Chain ``upstream`` (dL/da) through the activation; ``a`` = activate(z)."""
    if name == "relu":
        return upstream * (z > 0)
    if name == "sigmoid":
        return upstream * a * (1 - a)
    if name == "tanh":
        return upstream * (1 - a * a)
    if name == "linear":
        return upstream
    raise ValueError(f"unknown activation {name!r}")


def softmax(logits, axis=-1):
    """Max-shifted softmax along ``axis``."""
    logits = np.asarray(logits)
    if logits.shape[axis] < 1:
        raise DimensionError("softmax needs at least one logit")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy_loss(probs, label) -> float:
    """Sparse categorical cross-entropy ``-ln p[label]`` with ``p`` floored at 1e-12."""
    probs = np.asarray(probs)
    if probs.ndim == 1:
        if not 0 <= int(label) < probs.shape[0]:
            raise IndexError(f"label {label} out of range for {probs.shape[0]} classes")
        return float(-np.log(max(float(probs[int(label)]), PROB_FLOOR)))
    labels = np.asarray(label, dtype=int)
    if labels.shape != probs.shape[:1] or labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise IndexError("labels out of range or not matching the batch")
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def _same_pad(x, k):
    p = k // 2
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def im2col(x, k):
    """(N, H, W, C) -> (N, H, W, k*k*C) windows of the zero-padded input."""
    xp = _same_pad(x, k)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N, H, W, C, k, k
    n, h, w, c = x.shape
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, h, w, k * k * c)


def conv2d_forward(x, kernel, bias, activation="linear"):
    """Same-padded stride-1 convolution (cross-correlation form).

    ``x`` is (H, W, Cin) or (N, H, W, Cin); ``kernel`` is (k, k, Cin, Cout).
    Returns ``(out, cache)``.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {kernel.shape[:2]}")
    if x.ndim != 4 or x.shape[3] != cin:
        raise DimensionError(f"input {x.shape} does not match kernel input channels {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} filters")
    cols = im2col(x, k)
    z = cols @ kernel.reshape(-1, cout) + bias
    a = activate(activation, z)
    cache = (cols, z, a, x.shape, activation)
    return (a[0] if single else a), cache


def conv2d_backward(dout, kernel, cache):
    cols, z, a, in_shape, activation = cache
    if dout.ndim == 3:
        dout = dout[None]
    k, _, cin, cout = kernel.shape
    dz = activation_grad(activation, z, a, dout)
    dz2 = dz.reshape(-1, cout)
    dkernel = (cols.reshape(-1, k * k * cin).T @ dz2).reshape(kernel.shape)
    dbias = dz2.sum(axis=0)
    dcols = (dz2 @ kernel.reshape(-1, cout).T).reshape(*dz.shape[:3], k, k, cin)
    n, h, w, _ = in_shape
    p = k // 2
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    return dxp[:, p:p + h, p:p + w, :], dkernel, dbias


def maxpool2d_forward(x, window):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Returns ``(out, cache)``; the cache holds the flat in-window argmax (first maximum wins).
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    n, h, w, c = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than input {h}x{w}")
    ho, wo = h // window, w // window
    blocks = x[:, :ho * window, :wo * window, :].reshape(n, ho, window, wo, window, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, window * window)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    cache = (idx, x.shape, window)
    return (out[0] if single else out), cache


def maxpool2d_backward(dout, cache):
    idx, in_shape, window = cache
    if dout.ndim == 3:
        dout = dout[None]
    n, h, w, c = in_shape
    ho, wo = h // window, w // window
    dblocks = np.zeros((n, ho, wo, c, window * window), dtype=dout.dtype)
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    dblocks = dblocks.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, :ho * window, :wo * window, :] = dblocks.reshape(n, ho * window, wo * window, c)
    return dx


def dense_forward(x, weight, bias, activation="linear"):
    """``activation(x @ W + b)`` for ``x`` of shape (n,) or (N, n)."""
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense input {x.shape} incompatible with weight {weight.shape}")
    z = x @ weight + bias
    a = activate(activation, z)
    cache = (x, z, a, activation)
    return (a[0] if single else a), cache


def dense_backward(dout, weight, cache):
    x, z, a, activation = cache
    if dout.ndim == 1:
        dout = dout[None]
    dz = activation_grad(activation, z, a, dout)
    return dz @ weight.T, x.T @ dz, dz.sum(axis=0)


def upsample2d_forward(x, factor):
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def upsample2d_backward(dout, factor):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // factor, factor, w // factor, factor, c).sum(axis=(2, 4))
