"""Forward/backward pairs for the few layers the denoiser needs.

Every forward returns (out, cache); the matching backward takes the
upstream gradient and the cache.  Arrays carry arbitrary leading batch
axes; the last axis is the feature axis.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5


def linear(x, w, b=None):
    out = x @ w
    if b is not None:
        out = out + b
    return out, x


def linear_backward(dout, x, w, need_bias=True):
    flat_x = x.reshape(-1, x.shape[-1])
    flat_d = dout.reshape(-1, dout.shape[-1])
    dw = flat_x.T @ flat_d
    db = flat_d.sum(axis=0) if need_bias else None
    dx = dout @ w.T
    return dx, dw, db


def layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layernorm_backward(dout, cache, g):
    xhat, rstd = cache
    flat_d = dout.reshape(-1, dout.shape[-1])
    dg = (flat_d * xhat.reshape(flat_d.shape)).sum(axis=0)
    db = flat_d.sum(axis=0)
    dxhat = dout * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation."""
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_backward(dout, cache):
    x, th = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dout * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def softmax(logits, axis=-1):
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def split_heads(x, heads):
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x):
    *lead, h, n, dk = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dk)


def attention(q, k, v):
    """Scaled dot-product attention on head-split arrays (..., H, N, dk)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = softmax((q @ k.swapaxes(-1, -2)) * scale)
    return p @ v, (q, k, v, p, scale)


def attention_backward(dout, cache):
    q, k, v, p, scale = cache
    dv = p.swapaxes(-1, -2) @ dout
    dp = dout @ v.swapaxes(-1, -2)
    dlogits = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = dlogits @ k
    dk = dlogits.swapaxes(-1, -2) @ q
    return dq, dk, dv


def sinusoid(values, dim, max_period=10000.0):
    """Sin/cos features of a scalar array, shape values.shape + (dim,)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.asarray(values, dtype=np.float64)[..., None] * freqs
    out = np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)
    if dim % 2:
        out = np.concatenate([out, np.zeros(out.shape[:-1] + (1,))], axis=-1)
    return out


def position_table(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table, one row per token in row-major order."""
    ys, xs = np.mgrid[0:grid, 0:grid]
    half = dim // 2
    return np.concatenate([sinusoid(ys.ravel(), half, 100.0),
                           sinusoid(xs.ravel(), dim - half, 100.0)], axis=-1)
