"""Layer primitives with hand-written backward passes.

Every ``*_fwd`` returns ``(out, cache)`` and the matching ``*_bwd`` takes
``(dout, cache)`` and returns ``(dx, grads)`` where ``grads`` maps parameter
suffixes to gradient arrays. Arrays keep the dtype of their inputs.
"""
from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def linear_fwd(x, W, b):
    return x @ W + b, (x, W)


def linear_bwd(dy, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}


def layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(LN_EPS))
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_bwd(dy, cache):
    xhat, rstd, g = cache
    d = xhat.shape[-1]
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    flat = lambda a: a.reshape(-1, d)
    return dx, {"g": (flat(dy) * flat(xhat)).sum(axis=0), "b": flat(dy).sum(axis=0)}


def gelu_fwd(x):
    c = x.dtype.type(_GELU_C)
    u = c * (x + x.dtype.type(0.044715) * (x * x * x))  # x**3 hits slow powf
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    c = x.dtype.type(_GELU_C)
    du = c * (1.0 + x.dtype.type(3 * 0.044715) * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def dropout_fwd(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep, keep


def dropout_bwd(dy, keep):
    return dy if keep is None else dy * keep


def attention_fwd(x, p, n_heads, key_mask):
    """Multi-head self-attention over ``x`` [B, T, D].

    ``key_mask`` [B, T] is True for real tokens; padded keys get exactly zero
    attention weight so they cannot influence any output row.
    """
    B, T, D = x.shape
    dh = D // n_heads
    qkv, c_qkv = linear_fwd(x, p["qkv.W"], p["qkv.b"])
    qkv = qkv.reshape(B, T, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = x.dtype.type(1.0 / math.sqrt(dh))
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s = np.where(key_mask[:, None, None, :], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    y, c_out = linear_fwd(o, p["out.W"], p["out.b"])
    return y, (c_qkv, c_out, q, k, v, a, scale, n_heads)


def attention_bwd(dy, cache):
    c_qkv, c_out, q, k, v, a, scale, n_heads = cache
    B, H, T, dh = q.shape
    do, g_out = linear_bwd(dy, c_out)
    do = do.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, T, 3 * H * dh)
    dx, g_qkv = linear_bwd(dqkv, c_qkv)
    grads = {"qkv.W": g_qkv["W"], "qkv.b": g_qkv["b"], "out.W": g_out["W"], "out.b": g_out["b"]}
    return dx, grads


def block_fwd(x, p, n_heads, key_mask, dropout=0.0, rng=None):
    """Pre-norm transformer block: attention then GELU MLP, both residual."""
    h1, c_ln1 = layernorm_fwd(x, p["ln1.g"], p["ln1.b"])
    att, c_att = attention_fwd(h1, {k[5:]: v for k, v in p.items() if k.startswith("attn.")},
                               n_heads, key_mask)
    att, k1 = dropout_fwd(att, dropout, rng)
    x = x + att
    h2, c_ln2 = layernorm_fwd(x, p["ln2.g"], p["ln2.b"])
    u, c_fc1 = linear_fwd(h2, p["fc1.W"], p["fc1.b"])
    g, c_gelu = gelu_fwd(u)
    m, c_fc2 = linear_fwd(g, p["fc2.W"], p["fc2.b"])
    m, k2 = dropout_fwd(m, dropout, rng)
    return x + m, (c_ln1, c_att, k1, c_ln2, c_fc1, c_gelu, c_fc2, k2)


def block_bwd(dy, cache):
    c_ln1, c_att, k1, c_ln2, c_fc1, c_gelu, c_fc2, k2 = cache
    grads = {}
    dm = dropout_bwd(dy, k2)
    dg, g = linear_bwd(dm, c_fc2)
    grads["fc2.W"], grads["fc2.b"] = g["W"], g["b"]
    du = gelu_bwd(dg, c_gelu)
    dh2, g = linear_bwd(du, c_fc1)
    grads["fc1.W"], grads["fc1.b"] = g["W"], g["b"]
    dx_ln2, g = layernorm_bwd(dh2, c_ln2)
    grads["ln2.g"], grads["ln2.b"] = g["g"], g["b"]
    dx = dy + dx_ln2
    datt = dropout_bwd(dx, k1)
    dh1, g = attention_bwd(datt, c_att)
    grads.update({"attn." + k: v for k, v in g.items()})
    dx_ln1, g = layernorm_bwd(dh1, c_ln1)
    grads["ln1.g"], grads["ln1.b"] = g["g"], g["b"]
    return dx + dx_ln1, grads


def sigmoid(x):
    """Overflow-free logistic."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype)
