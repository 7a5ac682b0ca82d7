"""Fused elementwise/row kernels for the training hot path.

numba compiles these as parallel loops when available; the numpy fallbacks
compute identical values (parallelism is over independent elements or rows,
so results stay bitwise deterministic). Only the shapes that dominate
training cost live here: gelu, tanh, row softmax, row layer-norm.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def _np_gelu_forward(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _np_gelu_backward(g, x, t):
    return g * (0.5 * (1.0 + t)
                + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x))


def _np_tanh_backward(g, t):
    return g * (1.0 - t * t)


def _np_softmax_forward(x2):
    shifted = x2 - x2.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def _np_softmax_backward(g2, s2):
    t = g2 * s2
    t -= t.sum(axis=1, keepdims=True) * s2
    return t


def _np_layernorm_forward(x2, gain, bias, eps):
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def _np_layernorm_backward(g2, xhat, inv, gain):
    dxhat = g2 * gain
    dx = inv[:, None] * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    dgain = (g2 * xhat).sum(axis=0)
    dbias = g2.sum(axis=0)
    return dx, dgain, dbias


if HAVE_NUMBA:

    @njit(parallel=True)
    def _nb_gelu_forward(x, out, t_save):
        for i in prange(x.size):
            v = x[i]
            t = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
            t_save[i] = t
            out[i] = 0.5 * v * (1.0 + t)

    @njit(parallel=True)
    def _nb_gelu_backward(g, x, t, out):
        for i in prange(x.size):
            v = x[i]
            tv = t[i]
            out[i] = g[i] * (0.5 * (1.0 + tv)
                             + 0.5 * v * (1.0 - tv * tv) * _GELU_C
                             * (1.0 + 3.0 * _GELU_A * v * v))

    @njit(parallel=True)
    def _nb_tanh_forward(x, out):
        for i in prange(x.size):
            out[i] = math.tanh(x[i])

    @njit(parallel=True)
    def _nb_tanh_backward(g, t, out):
        for i in prange(t.size):
            out[i] = g[i] * (1.0 - t[i] * t[i])

    @njit(parallel=True)
    def _nb_softmax_forward(x2, out):
        rows, n = x2.shape
        for r in prange(rows):
            m = x2[r, 0]
            for j in range(1, n):
                if x2[r, j] > m:
                    m = x2[r, j]
            total = 0.0
            for j in range(n):
                e = math.exp(x2[r, j] - m)
                out[r, j] = e
                total += e
            for j in range(n):
                out[r, j] /= total

    @njit(parallel=True)
    def _nb_softmax_backward(g2, s2, out):
        rows, n = g2.shape
        for r in prange(rows):
            dot = 0.0
            for j in range(n):
                dot += g2[r, j] * s2[r, j]
            for j in range(n):
                out[r, j] = (g2[r, j] - dot) * s2[r, j]

    @njit(parallel=True)
    def _nb_layernorm_forward(x2, gain, bias, eps, out, xhat, inv):
        rows, n = x2.shape
        for r in prange(rows):
            mu = 0.0
            for j in range(n):
                mu += x2[r, j]
            mu /= n
            var = 0.0
            for j in range(n):
                c = x2[r, j] - mu
                var += c * c
            var /= n
            s = 1.0 / math.sqrt(var + eps)
            inv[r] = s
            for j in range(n):
                h = (x2[r, j] - mu) * s
                xhat[r, j] = h
                out[r, j] = h * gain[j] + bias[j]

    @njit(parallel=True)
    def _nb_layernorm_backward_dx(g2, xhat, inv, gain, dx):
        rows, n = g2.shape
        for r in prange(rows):
            mean_d = 0.0
            mean_dx = 0.0
            for j in range(n):
                d = g2[r, j] * gain[j]
                mean_d += d
                mean_dx += d * xhat[r, j]
            mean_d /= n
            mean_dx /= n
            for j in range(n):
                dx[r, j] = inv[r] * (g2[r, j] * gain[j] - mean_d - xhat[r, j] * mean_dx)


def _flat(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1)


def gelu_forward(x: np.ndarray):
    """Returns (gelu(x), tanh-term saved for backward)."""
    if HAVE_NUMBA:
        xf = _flat(x)
        out = np.empty_like(xf)
        t = np.empty_like(xf)
        _nb_gelu_forward(xf, out, t)
        return out.reshape(x.shape), t.reshape(x.shape)
    return _np_gelu_forward(x)


def gelu_backward(g, x, t):
    if HAVE_NUMBA:
        gf, xf, tf = _flat(g), _flat(x), _flat(t)
        out = np.empty_like(gf)
        _nb_gelu_backward(gf, xf, tf, out)
        return out.reshape(x.shape)
    return _np_gelu_backward(g, x, t)


def tanh_forward(x: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and x.size >= 4096:
        xf = _flat(x)
        out = np.empty_like(xf)
        _nb_tanh_forward(xf, out)
        return out.reshape(x.shape)
    return np.tanh(x)


def tanh_backward(g, t):
    if HAVE_NUMBA and t.size >= 4096:
        gf, tf = _flat(g), _flat(t)
        out = np.empty_like(gf)
        _nb_tanh_backward(gf, tf, out)
        return out.reshape(t.shape)
    return _np_tanh_backward(g, t)


def softmax_lastaxis_forward(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    x2 = np.ascontiguousarray(x).reshape(-1, n)
    if HAVE_NUMBA and x2.size >= 4096:
        out = np.empty_like(x2)
        _nb_softmax_forward(x2, out)
        return out.reshape(x.shape)
    return _np_softmax_forward(x2.copy()).reshape(x.shape)


def softmax_lastaxis_backward(g, s):
    n = s.shape[-1]
    g2 = np.ascontiguousarray(g).reshape(-1, n)
    s2 = np.ascontiguousarray(s).reshape(-1, n)
    if HAVE_NUMBA and g2.size >= 4096:
        out = np.empty_like(g2)
        _nb_softmax_backward(g2, s2, out)
        return out.reshape(s.shape)
    return _np_softmax_backward(g2, s2).reshape(s.shape)


def layernorm_forward(x, gain, bias, eps):
    """Returns (out, xhat, inv_std_per_row) with rows flattened off-axis."""
    n = x.shape[-1]
    x2 = np.ascontiguousarray(x).reshape(-1, n)
    if HAVE_NUMBA and x2.size >= 4096:
        out = np.empty_like(x2)
        xhat = np.empty_like(x2)
        inv = np.empty(x2.shape[0])
        _nb_layernorm_forward(x2, gain, bias, eps, out, xhat, inv)
        return out.reshape(x.shape), xhat, inv
    out, xhat, inv = _np_layernorm_forward(x2, gain, bias, eps)
    return out.reshape(x.shape), xhat, inv


def layernorm_backward(g, xhat, inv, gain, x_shape):
    n = x_shape[-1]
    g2 = np.ascontiguousarray(g).reshape(-1, n)
    if HAVE_NUMBA and g2.size >= 4096:
        dx = np.empty_like(g2)
        _nb_layernorm_backward_dx(g2, xhat, inv, gain, dx)
        dgain = (g2 * xhat).sum(axis=0)
        dbias = g2.sum(axis=0)
        return dx.reshape(x_shape), dgain, dbias
    dx, dgain, dbias = _np_layernorm_backward(g2, xhat, inv, gain)
    return dx.reshape(x_shape), dgain, dbias
