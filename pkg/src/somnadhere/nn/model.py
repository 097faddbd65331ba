"""Encoder, decoder, and classifier with exact gradients.

Weights live in a flat :class:`ModelWeights` mapping; names are
``enc.*`` (patch projection, positions, blocks, final norm), ``dec.*``
(blocks, final norm, reconstruction head) and ``cls.*`` (positions, input
projection, CLS token, blocks, final norm, head).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .config import ModelConfig

_BLOCK_SHAPES = (
    ("ln1.g", lambda D, M: (D,)), ("ln1.b", lambda D, M: (D,)),
    ("attn.qkv.W", lambda D, M: (D, 3 * D)), ("attn.qkv.b", lambda D, M: (3 * D,)),
    ("attn.out.W", lambda D, M: (D, D)), ("attn.out.b", lambda D, M: (D,)),
    ("ln2.g", lambda D, M: (D,)), ("ln2.b", lambda D, M: (D,)),
    ("fc1.W", lambda D, M: (D, M)), ("fc1.b", lambda D, M: (M,)),
    ("fc2.W", lambda D, M: (M, D)), ("fc2.b", lambda D, M: (D,)),
)


class NNError(ValueError):
    pass


class ModelWeights(dict):
    """Ordered name → array mapping; also used for gradients and moments."""

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights((k, v.astype(dtype)) for k, v in self.items())

    def copy(self) -> "ModelWeights":
        return ModelWeights((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "ModelWeights":
        return ModelWeights((k, np.zeros_like(v)) for k, v in self.items())

    def group(self, prefix: str) -> list:
        return [k for k in self if k.startswith(prefix)]

    @property
    def dtype(self):
        return next(iter(self.values())).dtype


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    """Normal(0, 0.02) matrices and embeddings, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    D, M = cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim
    shapes = [("enc.patch.W", (cfg.token_dim, D)), ("enc.patch.b", (D,)), ("enc.pos", (cfg.max_tokens, D))]
    for i in range(cfg.n_enc_blocks):
        shapes += [(f"enc.blocks.{i}.{n}", f(D, M)) for n, f in _BLOCK_SHAPES]
    shapes += [("enc.ln_f.g", (D,)), ("enc.ln_f.b", (D,))]
    for i in range(cfg.n_dec_blocks):
        shapes += [(f"dec.blocks.{i}.{n}", f(D, M)) for n, f in _BLOCK_SHAPES]
    shapes += [("dec.ln_f.g", (D,)), ("dec.ln_f.b", (D,)),
               ("dec.head.W", (D, cfg.spec_bins)), ("dec.head.b", (cfg.spec_bins,)),
               ("cls.pos", (cfg.max_tokens, D)), ("cls.in.W", (2 * D, D)), ("cls.in.b", (D,)),
               ("cls.token", (D,))]
    for i in range(cfg.n_cls_layers):
        shapes += [(f"cls.blocks.{i}.{n}", f(D, M)) for n, f in _BLOCK_SHAPES]
    shapes += [("cls.ln_f.g", (D,)), ("cls.ln_f.b", (D,)), ("cls.head.W", (D, 1)), ("cls.head.b", (1,))]
    w = ModelWeights()
    for name, shape in shapes:
        if name.endswith(".g"):
            w[name] = np.ones(shape, dtype)
        elif name.endswith(".b"):
            w[name] = np.zeros(shape, dtype)
        else:
            w[name] = (0.02 * rng.standard_normal(shape)).astype(dtype)
    return w


def _block_params(w, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in w.items() if k.startswith(prefix)}


def _check(x, where):
    if not np.isfinite(x).all():
        raise NNError(f"non-finite activations in {where}")


def _stack_fwd(x, w, prefix, n_blocks, n_heads, mask, dropout, rng):
    caches = []
    for i in range(n_blocks):
        x, c = ops.block_fwd(x, _block_params(w, f"{prefix}.blocks.{i}."), n_heads, mask, dropout, rng)
        _check(x, f"{prefix} block {i}")
        caches.append(c)
    x, c_ln = ops.layernorm_fwd(x, w[f"{prefix}.ln_f.g"], w[f"{prefix}.ln_f.b"])
    return x, (caches, c_ln)


def _stack_bwd(dx, cache, prefix, grads):
    caches, c_ln = cache
    dx, g = ops.layernorm_bwd(dx, c_ln)
    grads[f"{prefix}.ln_f.g"], grads[f"{prefix}.ln_f.b"] = g["g"], g["b"]
    for i in reversed(range(len(caches))):
        dx, g = ops.block_bwd(dx, caches[i])
        for k, v in g.items():
            grads[f"{prefix}.blocks.{i}.{k}"] = v
    return dx


def _batched(x, mask, ndim):
    single = x.ndim == ndim - 1
    if single:
        x = x[None]
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    elif single:
        mask = np.asarray(mask, dtype=bool)[None]
    if mask.shape != x.shape[:2]:
        raise NNError(f"mask shape {mask.shape} does not match tokens {x.shape[:2]}")
    if not mask.any(axis=1).all():
        raise NNError("every sequence needs at least one unmasked token")
    return x, np.asarray(mask, dtype=bool), single


def _rng_for(train, rng, cfg):
    return rng if (train and cfg.dropout_rate > 0) else None


def encoder_forward(features, w: ModelWeights, cfg: ModelConfig, mask=None, *, train=False, rng=None,
                    return_cache=False):
    """Latents ``[.., T, D]`` from token feature vectors ``[.., T, token_dim]``."""
    x, mask, single = _batched(np.asarray(features, dtype=w.dtype), mask, 3)
    B, T, F = x.shape
    if F != cfg.token_dim:
        raise NNError(f"token features have width {F}, config expects {cfg.token_dim}")
    if T > cfg.max_tokens:
        raise NNError(f"{T} tokens exceed max_tokens {cfg.max_tokens}")
    h, c_patch = ops.linear_fwd(x, w["enc.patch.W"], w["enc.patch.b"])
    h = h + w["enc.pos"][:T]
    h, c_stack = _stack_fwd(h, w, "enc", cfg.n_enc_blocks, cfg.n_heads, mask, cfg.dropout_rate,
                            _rng_for(train, rng, cfg))
    out = h[0] if single else h
    return (out, (c_patch, c_stack, T, w["enc.pos"].shape[0])) if return_cache else out


def encoder_backward(dlat, cache, grads):
    c_patch, c_stack, T, n_pos = cache
    dh = _stack_bwd(dlat, c_stack, "enc", grads)
    grads["enc.pos"] = np.zeros((n_pos, dh.shape[-1]), dh.dtype)
    grads["enc.pos"][:T] = dh.sum(axis=0)
    _, g = ops.linear_bwd(dh, c_patch)
    grads["enc.patch.W"], grads["enc.patch.b"] = g["W"], g["b"]


def decoder_forward(latents, w: ModelWeights, cfg: ModelConfig, mask=None, *, train=False, rng=None,
                    return_cache=False):
    """Per-token spectrogram prediction ``[.., T, spec_bins]``."""
    x, mask, single = _batched(np.asarray(latents, dtype=w.dtype), mask, 3)
    if x.shape[-1] != cfg.embed_dim:
        raise NNError(f"latent width {x.shape[-1]} != embed_dim {cfg.embed_dim}")
    h, c_stack = _stack_fwd(x, w, "dec", cfg.n_dec_blocks, cfg.n_heads, mask, cfg.dropout_rate,
                            _rng_for(train, rng, cfg))
    y, c_head = ops.linear_fwd(h, w["dec.head.W"], w["dec.head.b"])
    out = y[0] if single else y
    return (out, (c_stack, c_head)) if return_cache else out


def decoder_backward(dy, cache, grads):
    c_stack, c_head = cache
    dh, g = ops.linear_bwd(dy, c_head)
    grads["dec.head.W"], grads["dec.head.b"] = g["W"], g["b"]
    return _stack_bwd(dh, c_stack, "dec", grads)


def classifier_logit(latents, w: ModelWeights, cfg: ModelConfig, mask=None, positions=None, *,
                     train=False, rng=None, return_cache=False):
    """Pre-sigmoid score for each sequence (shape ``[B]``, or scalar if unbatched).

    Each latent row is concatenated with the classifier's own positional
    embedding (row ``positions[t]``, default ``t``), projected back to
    ``embed_dim``, and a learnable CLS token is prepended.
    """
    x, mask, single = _batched(np.asarray(latents, dtype=w.dtype), mask, 3)
    B, T, D = x.shape
    if D != cfg.embed_dim:
        raise NNError(f"latent width {D} != embed_dim {cfg.embed_dim}")
    if positions is None:
        positions = np.broadcast_to(np.arange(T), (B, T))
    else:
        positions = np.asarray(positions)
        positions = np.broadcast_to(positions[None] if positions.ndim == 1 else positions, (B, T))
    pos = w["cls.pos"][positions]
    h, c_in = ops.linear_fwd(np.concatenate([x, pos], axis=-1), w["cls.in.W"], w["cls.in.b"])
    h = np.concatenate([np.broadcast_to(w["cls.token"], (B, 1, D)), h], axis=1)
    m = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
    h, c_stack = _stack_fwd(h, w, "cls", cfg.n_cls_layers, cfg.n_cls_heads, m, cfg.dropout_rate,
                            _rng_for(train, rng, cfg))
    logit, c_head = ops.linear_fwd(h[:, 0], w["cls.head.W"], w["cls.head.b"])
    logit = logit[:, 0]
    _check(logit, "classifier head")
    out = logit[0] if single else logit
    return (out, (c_in, c_stack, c_head, positions, T, w["cls.pos"].shape[0])) if return_cache else out


def classifier_forward(latents, w: ModelWeights, cfg: ModelConfig, mask=None, positions=None, **kw):
    """Score ``z = sigmoid(logit)`` in (0, 1)."""
    logit = classifier_logit(latents, w, cfg, mask, positions, **kw)
    z = ops.sigmoid(np.atleast_1d(logit))
    # saturated logistic rounds to exactly 0 or 1; keep z strictly inside (0, 1)
    fi = np.finfo(z.dtype)
    z = np.clip(z, fi.tiny, 1.0 - fi.epsneg)
    return z if np.ndim(logit) else z[0]


def classifier_embedding(latents, w: ModelWeights, cfg: ModelConfig, mask=None, positions=None):
    """Final CLS-token representation ``[.., D]`` fed to the classifier head."""
    logit, cache = classifier_logit(latents, w, cfg, mask, positions, return_cache=True)
    emb = cache[2][0]  # input of the head linear
    return emb if np.ndim(logit) else emb[0]


def classifier_backward(dlogit, cache, grads):
    c_in, c_stack, c_head, positions, T, n_pos = cache
    dh0, g = ops.linear_bwd(dlogit[:, None], c_head)
    grads["cls.head.W"], grads["cls.head.b"] = g["W"], g["b"]
    B, D = dh0.shape
    dh = np.zeros((B, T + 1, D), dh0.dtype)
    dh[:, 0] = dh0
    dh = _stack_bwd(dh, c_stack, "cls", grads)
    grads["cls.token"] = dh[:, 0].sum(axis=0)
    dcat, g = ops.linear_bwd(dh[:, 1:], c_in)
    grads["cls.in.W"], grads["cls.in.b"] = g["W"], g["b"]
    dpos = np.zeros((n_pos, D), dh.dtype)
    np.add.at(dpos, positions.ravel(), dcat[..., D:].reshape(-1, D))
    grads["cls.pos"] = dpos
    return dcat[..., :D]


@dataclass
class Batch:
    """One training batch.

    ``features`` [B, T, token_dim] and ``mask`` [B, T] (True = real token).
    Pretraining needs ``target`` [B, T, spec_bins]; classification needs
    ``labels`` [B] and may supply precomputed frozen ``latents`` [B, T, D].
    """
    mask: np.ndarray
    features: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    latents: Optional[np.ndarray] = None


def pretrain_loss(pred, target, mask):
    """MSE over real tokens and all bins, and its gradient wrt ``pred``."""
    m = mask[..., None].astype(pred.dtype)
    n = pred.dtype.type(mask.sum() * pred.shape[-1])
    diff = (pred - target.astype(pred.dtype)) * m
    return float((diff * diff).sum() / n), 2.0 * diff / n


def bce_loss(logit, labels):
    """Mean binary cross-entropy from logits, and its gradient wrt ``logit``."""
    y = labels.astype(logit.dtype)
    loss = ops.softplus(logit) - y * logit
    return float(loss.mean()), (ops.sigmoid(logit) - y) / logit.dtype.type(logit.size)


def loss_and_grads(batch: Batch, w: ModelWeights, cfg: ModelConfig, mode: str, *, train=False, rng=None):
    """Loss and gradients for every weight; untouched groups get exact zeros.

    In ``"classify"`` mode the encoder is frozen: it runs forward only (or
    ``batch.latents`` is used directly) and its gradients are zero.
    """
    grads = ModelWeights()
    if mode == "pretrain":
        lat, c_enc = encoder_forward(batch.features, w, cfg, batch.mask, train=train, rng=rng,
                                     return_cache=True)
        pred, c_dec = decoder_forward(lat, w, cfg, batch.mask, train=train, rng=rng, return_cache=True)
        loss, dpred = pretrain_loss(pred, batch.target, batch.mask)
        dlat = decoder_backward(dpred, c_dec, grads)
        encoder_backward(dlat, c_enc, grads)
    elif mode == "classify":
        lat = batch.latents
        if lat is None:
            lat = encoder_forward(batch.features, w, cfg, batch.mask)
        logit, c_cls = classifier_logit(lat, w, cfg, batch.mask, train=train, rng=rng, return_cache=True)
        loss, dlogit = bce_loss(logit, np.asarray(batch.labels))
        classifier_backward(dlogit, c_cls, grads)
    else:
        raise NNError(f"unknown mode {mode!r}")
    if not np.isfinite(loss):
        raise NNError(f"non-finite {mode} loss")
    out = ModelWeights()
    for k, v in w.items():
        out[k] = grads[k].astype(v.dtype, copy=False) if k in grads else np.zeros_like(v)
    return loss, out
