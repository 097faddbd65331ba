"""Signal conditioning and spectral estimation.

Filtering and resampling go through :mod:`scipy.signal`; the multitaper
spectrogram is computed here directly from DPSS tapers so the windowing and
bin conventions stay under our control.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sps
from scipy.signal.windows import dpss

__all__ = [
    "Signal",
    "FilterSpec",
    "Spectrogram",
    "RESP_HIGHPASS",
    "EEG_BANDPASS",
    "eeg_filter_for",
    "iir_filter",
    "resample",
    "normalize",
    "multitaper_spectrogram",
    "rescale_amplitude",
    "bin_spectrogram",
]


class DSPError(ValueError):
    """Raised when a signal or filter specification is unusable."""


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    rate_hz: float

    def __post_init__(self):
        if not self.rate_hz > 0:
            raise DSPError(f"rate_hz must be positive, got {self.rate_hz}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate_hz

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FilterSpec:
    kind: str  # "highpass" | "bandpass"
    band_hz: tuple
    order: int = 4

    def validate(self, rate_hz: float) -> None:
        if self.kind not in ("highpass", "bandpass"):
            raise DSPError(f"unknown filter kind {self.kind!r}")
        if self.order < 1:
            raise DSPError("filter order must be >= 1")
        band = tuple(self.band_hz)
        if len(band) != (1 if self.kind == "highpass" else 2):
            raise DSPError(f"{self.kind} needs {1 if self.kind == 'highpass' else 2} cutoffs")
        nyq = rate_hz / 2.0
        for f in band:
            if not 0 < f < nyq:
                raise DSPError(f"cutoff {f} Hz must lie in (0, Nyquist={nyq}) Hz")
        if self.kind == "bandpass" and band[0] >= band[1]:
            raise DSPError("bandpass cutoffs must be increasing")


RESP_HIGHPASS = FilterSpec("highpass", (0.05,), 4)
EEG_BANDPASS = FilterSpec("bandpass", (0.3, 32.0), 4)


def eeg_filter_for(rate_hz: float, spec: FilterSpec = EEG_BANDPASS) -> FilterSpec:
    """EEG conditioning filter usable at ``rate_hz``.

    The 32 Hz upper edge sits exactly at Nyquist for 64 Hz data, so at rates
    that low the band-pass degrades to its high-pass half.
    """
    if spec.kind == "bandpass" and spec.band_hz[1] >= rate_hz / 2.0:
        return FilterSpec("highpass", (spec.band_hz[0],), spec.order)
    return spec


@dataclass(frozen=True)
class Spectrogram:
    """Power matrix of shape ``(n_windows, n_freq_bins)``."""

    power: np.ndarray
    freqs_hz: np.ndarray
    window_s: float = 30.0
    step_s: float = 30.0

    @property
    def n_windows(self) -> int:
        return self.power.shape[0]


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise DSPError("signal contains non-finite samples")


def iir_filter(sig: Signal, spec: FilterSpec) -> Signal:
    """Zero-phase Butterworth filtering (forward-backward second-order sections)."""
    spec.validate(sig.rate_hz)
    x = np.asarray(sig.samples, dtype=np.float64)
    _check_finite(x)
    band = tuple(spec.band_hz)
    wn = band[0] if spec.kind == "highpass" else band
    sos = sps.butter(spec.order, wn, btype=spec.kind, fs=sig.rate_hz, output="sos")
    # even reflection keeps the DC level continuous at the edges; pad a few time constants
    padlen = min(len(x) - 1, int(3.0 * sig.rate_hz / band[0]))
    y = sps.sosfiltfilt(sos, x, padtype="even", padlen=padlen)
    return Signal(y, sig.rate_hz)


def resample(sig: Signal, to_hz: float) -> Signal:
    """Polyphase resampling to ``to_hz`` with built-in anti-alias FIR.

    The rate ratio is approximated by a rational number with denominator at
    most 1000. Edges are padded by a fitted line, which keeps constant (and
    linear) inputs exact and the operation linear.
    """
    if not to_hz > 0:
        raise DSPError(f"to_hz must be positive, got {to_hz}")
    x = np.asarray(sig.samples, dtype=np.float64)
    if to_hz == sig.rate_hz:
        return Signal(x.copy(), sig.rate_hz)
    ratio = Fraction(to_hz / sig.rate_hz).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    y = sps.resample_poly(x, up, down, window=_polyphase_fir(up, down), padtype="line")
    return Signal(y, float(to_hz))


def _polyphase_fir(up: int, down: int) -> np.ndarray:
    """Kaiser low-pass FIR with every polyphase branch normalized to unit DC gain.

    ``resample_poly`` scales the taps by ``up``; each branch (taps congruent
    mod ``up``) therefore needs to sum to ``1 / up`` for constants to pass
    through exactly.
    """
    max_rate = max(up, down)
    half_len = 10 * max_rate
    h = sps.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", 5.0))
    for r in range(up):
        h[r::up] *= (1.0 / up) / h[r::up].sum()
    return h


def normalize(sig: Signal, clip: float = 5.0) -> Signal:
    """Robust z-scoring: median to 0, IQR/1.349 to 1, then clip to ``±clip``.

    A constant input has zero spread and maps to all zeros.
    """
    x = np.asarray(sig.samples, dtype=np.float64)
    if x.size == 0:
        raise DSPError("cannot normalize an empty signal")
    med = np.median(x)
    q75, q25 = np.percentile(x, [75, 25])
    scale = (q75 - q25) / 1.349
    if scale <= 0 or not np.isfinite(scale):
        return Signal(np.zeros_like(x), sig.rate_hz)
    y = np.clip((x - med) / scale, -clip, clip)
    return Signal(y, sig.rate_hz)


def rescale_amplitude(sig: Signal, factor: float) -> Signal:
    if not factor > 0:
        raise DSPError(f"rescale factor must be positive, got {factor}")
    return Signal(np.asarray(sig.samples) * factor, sig.rate_hz)


@functools.lru_cache(maxsize=8)
def _dpss(win: int, nw: float, k: int) -> np.ndarray:
    t = dpss(win, nw, Kmax=k)
    t.flags.writeable = False
    return t


def multitaper_spectrogram(
    sig: Signal,
    window_s: float = 30.0,
    step_s: float = 30.0,
    fmax_hz: float = 32.0,
    n_tapers: int = 5,
    nw: float = 3.0,
    chunk: int = 64,
) -> Spectrogram:
    """Multitaper power spectral density per sliding window.

    Each window is mean-detrended, multiplied by ``n_tapers`` DPSS tapers with
    time-halfbandwidth ``nw``, and the one-sided periodograms (units of
    signal^2/Hz) are averaged. Bins above ``fmax_hz`` are dropped.

    Returns
    -------
    Spectrogram
        ``power`` has one row per window; there are
        ``floor((n - win) / step) + 1`` windows for ``n`` samples.
    """
    fs = float(sig.rate_hz)
    if fs < 2 * fmax_hz:
        raise DSPError(f"rate {fs} Hz is below 2 * fmax ({2 * fmax_hz} Hz)")
    win = int(round(window_s * fs))
    step = int(round(step_s * fs))
    x = np.asarray(sig.samples, dtype=np.float64)
    _check_finite(x)
    if len(x) < win:
        raise DSPError(f"signal of {len(x) / fs:.1f} s is shorter than one {window_s} s window")
    n_win = (len(x) - win) // step + 1
    tapers = _dpss(win, nw, n_tapers)  # (K, win), unit energy
    freqs = np.fft.rfftfreq(win, d=1.0 / fs)
    keep = freqs <= fmax_hz + 1e-9
    scale = np.full(keep.sum(), 2.0 / fs)
    scale[0] = 1.0 / fs
    if win % 2 == 0 and freqs[keep][-1] == fs / 2:
        scale[-1] = 1.0 / fs
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::step][:n_win]
    power = np.empty((n_win, keep.sum()))
    for lo in range(0, n_win, chunk):
        seg = frames[lo:lo + chunk]
        seg = seg - seg.mean(axis=1, keepdims=True)
        spec = sp_fft.rfft(seg[:, None, :] * tapers[None], axis=-1)[..., keep]
        power[lo:lo + chunk] = (spec.real ** 2 + spec.imag ** 2).mean(axis=1) * scale
    return Spectrogram(power, freqs[keep], window_s, step_s)


def bin_spectrogram(spec: Spectrogram, edges_hz) -> Spectrogram:
    """Average power into contiguous frequency bands ``[edges[i], edges[i+1])``.

    The last band is closed on the right so a 32 Hz cap bin is not lost.
    """
    edges = np.asarray(edges_hz, dtype=float)
    f = spec.freqs_hz
    cols = []
    for i in range(len(edges) - 1):
        hi_ok = f <= edges[i + 1] if i == len(edges) - 2 else f < edges[i + 1]
        sel = (f >= edges[i]) & hi_ok
        if not sel.any():
            raise DSPError(f"no spectrogram bins in [{edges[i]}, {edges[i + 1]}) Hz")
        cols.append(spec.power[:, sel].mean(axis=1))
    centers = 0.5 * (edges[:-1] + edges[1:])
    return Spectrogram(np.stack(cols, axis=1), centers, spec.window_s, spec.step_s)
