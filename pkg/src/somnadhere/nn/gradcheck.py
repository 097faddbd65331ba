"""Finite-difference verification of :func:`loss_and_grads`."""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .model import (Batch, ModelWeights, bce_loss, classifier_logit, decoder_forward, encoder_forward,
                    init_weights, loss_and_grads, pretrain_loss)

MODE_GROUPS = {"pretrain": ("enc.", "dec."), "classify": ("cls.",)}
# Denominator floors for relative error: the roundoff level of float32
# backprop on O(1) losses, and of the float64 finite-difference oracle.
FLOOR = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}
TOLERANCE = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}


def loss_only(batch: Batch, w: ModelWeights, cfg: ModelConfig, mode: str) -> float:
    if mode == "pretrain":
        lat = encoder_forward(batch.features, w, cfg, batch.mask)
        return pretrain_loss(decoder_forward(lat, w, cfg, batch.mask), batch.target, batch.mask)[0]
    lat = batch.latents if batch.latents is not None else encoder_forward(batch.features, w, cfg, batch.mask)
    return bce_loss(classifier_logit(lat, w, cfg, batch.mask), np.asarray(batch.labels))[0]


def numeric_grads(batch: Batch, w: ModelWeights, cfg: ModelConfig, mode: str, h: float = 2e-3,
                  max_per_tensor=None, rng=None) -> dict:
    """Fourth-order central differences in float64 for the trainable groups of ``mode``.

    Returns ``name -> (flat indices, derivative values)``. With
    ``max_per_tensor`` a random subset of entries is checked per tensor.
    """
    w = w.astype(np.float64)
    batch = Batch(**{k: (v.astype(np.float64) if isinstance(v, np.ndarray) and v.dtype.kind == "f" else v)
                     for k, v in vars(batch).items()})
    out = {}
    for name in w:
        if not name.startswith(MODE_GROUPS[mode]):
            continue
        flat = w[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
        vals = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            f = []
            for step in (2 * h, h, -h, -2 * h):
                flat[i] = orig + step
                f.append(loss_only(batch, w, cfg, mode))
            flat[i] = orig
            # fourth-order central stencil
            vals[j] = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h)
        out[name] = (idx, vals)
    return out


def max_rel_error(analytic: ModelWeights, numeric: dict, floor: float = 0.0) -> tuple:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over checked entries, and where."""
    worst, where = 0.0, None
    for name, (idx, vals) in numeric.items():
        a = analytic[name].reshape(-1)[idx].astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(vals)), floor)
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(denom > 0, np.abs(a - vals) / denom, 0.0)
        j = int(np.argmax(rel))
        if rel[j] > worst:
            worst, where = float(rel[j]), (name, int(idx[j]))
    return worst, where


def random_case(cfg: ModelConfig, seed: int, batch_size: int = 3):
    """Perturbed weights and a padded batch for gradient checks (float64)."""
    rng = np.random.default_rng([seed, 1])
    w = init_weights(cfg, seed, np.float64)
    for k in w:
        w[k] += 0.3 * rng.standard_normal(w[k].shape)
    T = cfg.max_tokens
    mask = np.ones((batch_size, T), dtype=bool)
    for b in range(1, batch_size):
        mask[b, max(1, T - 2 * b):] = False
    batch = Batch(mask=mask, features=rng.standard_normal((batch_size, T, cfg.token_dim)),
                  target=rng.standard_normal((batch_size, T, cfg.spec_bins)),
                  labels=(np.arange(batch_size) % 2 == 0).astype(np.float64))
    return w, batch


def check(cfg: ModelConfig, seed: int, mode: str, max_per_tensor=24) -> dict:
    """Relative errors of 32- and 64-bit analytic gradients against one 64-bit oracle.

    Every trainable tensor is checked on up to ``max_per_tensor`` random
    entries (all entries when ``None``).
    """
    w, batch = random_case(cfg, seed)
    num = numeric_grads(batch, w, cfg, mode, max_per_tensor=max_per_tensor,
                        rng=np.random.default_rng([seed, 2]))
    _, g64 = loss_and_grads(batch, w, cfg, mode)
    b32 = Batch(**{k: (v.astype(np.float32) if isinstance(v, np.ndarray) and v.dtype.kind == "f" else v)
                   for k, v in vars(batch).items()})
    _, g32 = loss_and_grads(b32, w.astype(np.float32), cfg, mode)
    frozen_zero = all(not g64[k].any() for k in g64 if not k.startswith(MODE_GROUPS[mode]))
    rel64 = max_rel_error(g64, num, FLOOR[np.dtype(np.float64)])
    rel32 = max_rel_error(g32, num, FLOOR[np.dtype(np.float32)])
    return {"rel64": rel64, "rel32": rel32, "frozen_zero": frozen_zero,
            "n_checked": sum(len(i) for i, _ in num.values()),
            "ok": rel64[0] < TOLERANCE[np.dtype(np.float64)] and rel32[0] < TOLERANCE[np.dtype(np.float32)]
            and frozen_zero}
