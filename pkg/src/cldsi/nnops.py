"""Forward/backward primitives for the from-scratch transformer.

Every forward returns (output, cache); the matching backward consumes the
cache and the upstream gradient.  All math is float64; gradients are checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-6
ATTN_NEG = -1e30  # additive mask value; large enough to zero the softmax row entry


def softmax(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softmax_backward(p, dp):
    """dz given p = softmax(z) and dp = dL/dp (last axis)."""
    inner = (dp * p).sum(axis=-1, keepdims=True)
    return p * (dp - inner)


def logsumexp(z, axis=-1):
    m = z.max(axis=axis)
    return m + np.log(np.exp(z - np.expand_dims(m, axis)).sum(axis=axis))


def rmsnorm_forward(x, g):
    """y = g * x / rms(x), rms over the last axis."""
    ms = (x * x).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + LN_EPS)
    xhat = x * inv
    return g * xhat, (xhat, inv, g)


def rmsnorm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    d = xhat.shape[-1]
    dx = inv * (dxhat - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d)
    return dx, dg


def dropout_forward(x, p, rng):
    if p <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep, keep


def dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


def linear_forward(x, w):
    return x @ w, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    dw = np.tensordot(x, dy, axes=(tuple(range(x.ndim - 1)), tuple(range(dy.ndim - 1))))
    return dy @ w.T, dw


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_forward(xq, xkv, wq, wk, wv, wo, n_heads, add_mask=None):
    """Multi-head scaled dot-product attention (no biases).

    add_mask is additive and broadcastable to (B, H, Tq, Tk); masked slots
    carry ATTN_NEG.
    """
    q = _split_heads(xq @ wq, n_heads)
    k = _split_heads(xkv @ wk, n_heads)
    v = _split_heads(xkv @ wv, n_heads)
    dh = q.shape[-1]
    scale = 1.0 / np.sqrt(dh)
    s = q @ k.transpose(0, 1, 3, 2) * scale
    if add_mask is not None:
        s = s + add_mask
    a = softmax(s)
    o = _merge_heads(a @ v)
    y = o @ wo
    cache = (xq, xkv, q, k, v, a, o, wq, wk, wv, wo, scale)
    return y, cache


def attention_backward(dy, cache):
    xq, xkv, q, k, v, a, o, wq, wk, wv, wo, scale = cache
    n_heads = q.shape[1]
    dwo = np.tensordot(o, dy, axes=((0, 1), (0, 1)))
    do = _split_heads(dy @ wo.T, n_heads)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = softmax_backward(a, da) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dwq = np.tensordot(xq, dq, axes=((0, 1), (0, 1)))
    dwk = np.tensordot(xkv, dk, axes=((0, 1), (0, 1)))
    dwv = np.tensordot(xkv, dv, axes=((0, 1), (0, 1)))
    dxq = dq @ wq.T
    dxkv = dk @ wk.T + dv @ wv.T
    return dxq, dxkv, dwq, dwk, dwv, dwo


def sinusoidal_positions(n_pos, dim):
    """Classic fixed sin/cos position table, shape (n_pos, dim)."""
    pos = np.arange(n_pos)[:, None]
    idx = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, idx / dim)
    pe = np.zeros((n_pos, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def padding_attn_mask(tokens, pad_id=0):
    """(B, 1, 1, Tk) additive mask hiding pad keys."""
    return np.where(tokens == pad_id, ATTN_NEG, 0.0)[:, None, None, :]


def causal_attn_mask(t):
    """(1, 1, T, T) additive mask hiding future keys."""
    m = np.triu(np.full((t, t), ATTN_NEG), k=1)
    return m[None, None, :, :]
