"""Respiration tokenization."""
from __future__ import annotations

import numpy as np

from ..dsp import Signal
from .config import ModelConfig


class TokenError(ValueError):
    pass


def patchify(resp: Signal, cfg: ModelConfig) -> np.ndarray:
    """Non-overlapping windows of ``cfg.patch_samples`` samples, ``[T, P]``.

    A trailing partial window is dropped and ``T`` is truncated to
    ``cfg.max_tokens``.
    """
    if abs(resp.rate_hz - cfg.resp_hz) > 1e-9:
        raise TokenError(f"respiration must be sampled at {cfg.resp_hz} Hz, got {resp.rate_hz}")
    P = cfg.patch_samples
    T = min(len(resp) // P, cfg.max_tokens)
    if T < 1:
        raise TokenError(f"signal of {len(resp)} samples is shorter than one {P}-sample patch")
    return np.asarray(resp.samples[: T * P], dtype=np.float32).reshape(T, P)


def _logspec_matrix(cfg: ModelConfig):
    freqs = np.fft.rfftfreq(cfg.patch_samples, 1.0 / cfg.resp_hz)
    keep = np.flatnonzero(freqs <= cfg.logspec_fmax_hz)
    groups = np.array_split(keep, min(cfg.logspec_bins, keep.size))
    pool = np.zeros((freqs.size, cfg.logspec_bins))
    for j, g in enumerate(groups):
        pool[g, j] = 1.0 / g.size
    return pool


def token_features(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Vectors the patch projection consumes, ``[T, cfg.token_dim]`` float32.

    ``raw`` passes samples through. ``logspec`` takes the Hann-windowed
    power spectrum of each patch up to ``logspec_fmax_hz``, averages it into
    ``logspec_bins`` bins, and returns ``log10(power + 1e-4)``: a fixed,
    parameter-free front end that makes breathing rhythm and regularity
    linearly accessible to short training runs.
    """
    tokens = np.asarray(tokens)
    if tokens.shape[-1] != cfg.patch_samples:
        raise TokenError(f"tokens have {tokens.shape[-1]} samples, expected {cfg.patch_samples}")
    if cfg.token_features == "raw":
        return tokens.astype(np.float32, copy=False)
    x = tokens.astype(np.float64)
    x = x - x.mean(axis=-1, keepdims=True)
    win = np.hanning(cfg.patch_samples)
    power = np.abs(np.fft.rfft(x * win, axis=-1)) ** 2 / (win ** 2).sum()
    pooled = power @ _logspec_matrix(cfg)
    return np.log10(pooled + 1e-4).astype(np.float32)
