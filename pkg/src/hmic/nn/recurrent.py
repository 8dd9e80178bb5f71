"""LSTM and GRU cells, single steps and full sequences with backpropagation through time."""
from __future__ import annotations

import numpy as np

from .functional import sigmoid
from .layers import DimensionError


def _split(a, parts):
    return np.split(a, parts, axis=-1)


def lstm_cell_step(x_t, h_prev, c_prev, W, b):
    """One LSTM step.

    ``W`` has shape (d + u, 4u) acting on the concatenation ``[x_t, h_prev]``; the four column
    blocks are the input gate, candidate memory, forget gate and output gate.
    Returns ``(h_t, c_t, gates)`` where ``gates = (i, c_tilde, f, o)``.
    """
    u = h_prev.shape[-1]
    if W.shape != (x_t.shape[-1] + u, 4 * u) or b.shape != (4 * u,):
        raise DimensionError(f"LSTM weights {W.shape} do not fit input {x_t.shape[-1]} / units {u}")
    xh = np.concatenate([x_t, h_prev], axis=-1)
    pre = xh @ W + b
    zi, zc, zf, zo = _split(pre, 4)
    i = sigmoid(zi)
    c_tilde = np.tanh(zc)
    f = sigmoid(zf)
    o = sigmoid(zo)
    c_t = i * c_tilde + f * c_prev
    h_t = o * np.tanh(c_t)
    return h_t, c_t, (i, c_tilde, f, o)


def gru_cell_step(x_t, h_prev, W, U, b):
    """One GRU step: update gate z, reset gate r, ``h = z*h_prev + (1-z)*tanh(...)``.

    ``W`` is (d, 3u), ``U`` is (u, 3u); column blocks are update, reset, candidate.
    Returns ``(h_t, gates)`` with ``gates = (z, r, h_tilde)``.
    """
    u = h_prev.shape[-1]
    if W.shape != (x_t.shape[-1], 3 * u) or U.shape != (u, 3 * u) or b.shape != (3 * u,):
        raise DimensionError(f"GRU weights {W.shape}/{U.shape} do not fit input {x_t.shape[-1]} / units {u}")
    wz, wr, wh = _split(W, 3)
    uz, ur, uh = _split(U, 3)
    bz, br, bh = _split(b, 3)
    z = sigmoid(x_t @ wz + h_prev @ uz + bz)
    r = sigmoid(x_t @ wr + h_prev @ ur + br)
    h_tilde = np.tanh(x_t @ wh + (r * h_prev) @ uh + bh)
    h_t = z * h_prev + (1 - z) * h_tilde
    return h_t, (z, r, h_tilde)


def lstm_forward(x, W, b, return_sequences=False):
    """Run an LSTM over ``x`` of shape (N, T, d) from zero state."""
    n, steps, _ = x.shape
    u = b.shape[0] // 4
    h = np.zeros((n, u), dtype=x.dtype)
    c = np.zeros((n, u), dtype=x.dtype)
    hs, cs, gates = [h], [c], []
    for t in range(steps):
        h, c, g = lstm_cell_step(x[:, t], h, c, W, b)
        hs.append(h)
        cs.append(c)
        gates.append(g)
    out = np.stack(hs[1:], axis=1) if return_sequences else h
    return out, (x, hs, cs, gates, return_sequences)


def lstm_backward(dout, W, cache):
    x, hs, cs, gates, return_sequences = cache
    n, steps, d = x.shape
    u = hs[0].shape[1]
    dW = np.zeros_like(W)
    db = np.zeros(4 * u, dtype=W.dtype)
    dx = np.zeros_like(x)
    dh = np.zeros((n, u), dtype=x.dtype)
    dc = np.zeros((n, u), dtype=x.dtype)
    if not return_sequences:
        dh = dh + dout
    for t in reversed(range(steps)):
        if return_sequences:
            dh = dh + dout[:, t]
        i, c_tilde, f, o = gates[t]
        c_t, c_prev, h_prev = cs[t + 1], cs[t], hs[t]
        tanh_c = np.tanh(c_t)
        do = dh * tanh_c
        dc = dc + dh * o * (1 - tanh_c ** 2)
        di = dc * c_tilde
        dct = dc * i
        df = dc * c_prev
        dpre = np.concatenate([di * i * (1 - i), dct * (1 - c_tilde ** 2),
                               df * f * (1 - f), do * o * (1 - o)], axis=-1)
        xh = np.concatenate([x[:, t], h_prev], axis=-1)
        dW += xh.T @ dpre
        db += dpre.sum(axis=0)
        dxh = dpre @ W.T
        dx[:, t] = dxh[:, :d]
        dh = dxh[:, d:]
        dc = dc * f
    return dx, dW, db


def gru_forward(x, W, U, b, return_sequences=False):
    n, steps, _ = x.shape
    u = U.shape[0]
    h = np.zeros((n, u), dtype=x.dtype)
    hs, gates = [h], []
    for t in range(steps):
        h, g = gru_cell_step(x[:, t], h, W, U, b)
        hs.append(h)
        gates.append(g)
    out = np.stack(hs[1:], axis=1) if return_sequences else h
    return out, (x, hs, gates, return_sequences)


def gru_backward(dout, W, U, cache):
    x, hs, gates, return_sequences = cache
    n, steps, d = x.shape
    u = U.shape[0]
    _, _, wh = _split(W, 3)
    uz, ur, uh = _split(U, 3)
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(3 * u, dtype=W.dtype)
    dx = np.zeros_like(x)
    dh = np.zeros((n, u), dtype=x.dtype)
    if not return_sequences:
        dh = dh + dout
    for t in reversed(range(steps)):
        if return_sequences:
            dh = dh + dout[:, t]
        z, r, h_tilde = gates[t]
        h_prev = hs[t]
        x_t = x[:, t]
        dz = dh * (h_prev - h_tilde)
        dht = dh * (1 - z)
        dh_prev = dh * z
        dah = dht * (1 - h_tilde ** 2)
        rh = r * h_prev
        drh = dah @ uh.T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        daz = dz * z * (1 - z)
        dar = dr * r * (1 - r)
        dW += np.concatenate([x_t.T @ daz, x_t.T @ dar, x_t.T @ dah], axis=1)
        dU += np.concatenate([h_prev.T @ daz, h_prev.T @ dar, rh.T @ dah], axis=1)
        db += np.concatenate([daz.sum(0), dar.sum(0), dah.sum(0)])
        dx[:, t] = daz @ W[:, :u].T + dar @ W[:, u:2 * u].T + dah @ wh.T
        dh_prev = dh_prev + daz @ uz.T + dar @ ur.T
        dh = dh_prev
    return dx, dW, dU, db
