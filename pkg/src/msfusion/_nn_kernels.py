"""Attention and activation kernels for the transformer.

Numpy's SIMD ``exp``/``tanh`` beat numba's scalar libm calls, so the
transcendental parts stay in numpy on both paths. What numba speeds up are
the reductions along the short last axis of the attention tensors (row max,
row sum, row dot), where numpy's reduction machinery dominates.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def gelu(x):
    """Tanh-approximated GELU; returns ``(y, tanh_term)`` for the backward."""
    t = x * x
    t *= x
    t *= GELU_A
    t += x
    t *= GELU_C
    np.tanh(t, out=t)
    y = 1.0 + t
    y *= x
    y *= 0.5
    return y, t


def gelu_backward(x, t, dy):
    du = GELU_C * (1.0 + 3 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _softmax_np(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return e


def _softmax_backward_np(p, dp, scale):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale


@njit
def _shift_rows_nb(s, out):
    rows, n = s.shape
    for r in range(rows):
        m = s[r, 0]
        for j in range(1, n):
            if s[r, j] > m:
                m = s[r, j]
        for j in range(n):
            out[r, j] = s[r, j] - m


@njit
def _normalize_rows_nb(e):
    rows, n = e.shape
    for r in range(rows):
        tot = 0.0
        for j in range(n):
            tot += e[r, j]
        inv = 1.0 / tot
        for j in range(n):
            e[r, j] *= inv


@njit
def _softmax_backward_rows_nb(p, dp, scale, out):
    rows, n = p.shape
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += dp[r, j] * p[r, j]
        for j in range(n):
            out[r, j] = p[r, j] * (dp[r, j] - dot) * scale


def _rows(a):
    return a.reshape(-1, a.shape[-1])


def _softmax_nb(s):
    s = np.ascontiguousarray(s)
    out = np.empty_like(s)
    _shift_rows_nb(_rows(s), _rows(out))
    np.exp(out, out=out)
    _normalize_rows_nb(_rows(out))
    return out


def _softmax_backward_nb(p, dp, scale):
    p = np.ascontiguousarray(p)
    dp = np.ascontiguousarray(dp)
    out = np.empty_like(p)
    _softmax_backward_rows_nb(_rows(p), _rows(dp), scale, _rows(out))
    return out


if USE_NUMBA:
    softmax, softmax_backward = _softmax_nb, _softmax_backward_nb
else:
    softmax, softmax_backward = _softmax_np, _softmax_backward_np
