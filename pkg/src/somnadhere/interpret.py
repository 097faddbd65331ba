"""Interpretability analyses: reconstructed spectra, REM-latency links, latent maps, trajectories."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .data import N1, N2, N3, REM, Hypnogram
from .dsp import Spectrogram
from .stats import MetricError, TestResult, pearson_r, welch_t

SO_BAND = (0.0, 1.0)
BETA_BAND = (16.0, 32.0)
EARLY_SLEEP_MIN = 60.0
MIN_COHORT_NIGHTS = 10
RECON_BANDS = 32
RECON_FREQS = np.arange(RECON_BANDS) + 0.5  # centers of the 1 Hz bands


class InterpretError(ValueError):
    pass


# --- reconstructed spectra ---------------------------------------------------------

def reconstruct_night(features: np.ndarray, w: nn.ModelWeights, mc: nn.ModelConfig) -> np.ndarray:
    """Decoder output for one night as linear power, one row per 30 s window.

    ``features`` are raw token features; the checkpoint's ``aux.*``
    normalization tensors map them in and the prediction back out.
    """
    x = (features - w["aux.tok_mean"]) / w["aux.tok_std"]
    y = nn.decoder_forward(nn.encoder_forward(x, w, mc), w, mc)
    logp = (y * w["aux.spec_std"] + w["aux.spec_mean"]).astype(np.float64)
    return 10.0 ** logp.reshape(-1, RECON_BANDS)


@dataclass
class SpectraDiff:
    freqs_hz: np.ndarray
    diff: np.ndarray  # normalized so max |diff| = 1 (all zeros if the cohorts coincide)
    raw_max_abs: float  # max |mean_a - mean_b| before normalization
    mean_a: np.ndarray
    mean_b: np.ndarray
    ci_a: np.ndarray  # (2, F) percentile bootstrap interval of cohort a's mean spectrum
    ci_b: np.ndarray
    n_a: int
    n_b: int
    band_tests: dict = field(default_factory=dict)  # band -> Welch TestResult on per-night band power


def _in_band(freqs, band):
    lo, hi = band
    sel = (freqs >= lo) & (freqs < hi)
    if not sel.any():
        raise InterpretError(f"no frequency bins in {lo}-{hi} Hz")
    return sel


def _boot_mean_ci(x: np.ndarray, n_boot: int, seed: int, level: float = 0.95) -> np.ndarray:
    rng = np.random.default_rng([seed, 61])
    idx = rng.integers(0, x.shape[0], size=(n_boot, x.shape[0]))
    means = x[idx].mean(axis=1)
    a = (1.0 - level) / 2.0
    return np.quantile(means, [a, 1.0 - a], axis=0)


def spectra_cohort_diff(spectra, labels, freqs_hz=RECON_FREQS, *, bands=None, n_boot: int = 1000,
                        seed: int = 0) -> SpectraDiff:
    """Cohort difference of time-averaged spectra, ``labels`` true minus false.

    Each night's spectrogram ``[windows, bins]`` is averaged over time, then
    over nights within each cohort; the difference is scaled by its largest
    absolute value. ``bands`` (default slow oscillation and beta) get a Welch
    test on per-night mean band power.
    """
    labels = np.asarray(labels, dtype=bool)
    freqs = np.asarray(freqs_hz, dtype=float)
    if len(spectra) != labels.size:
        raise InterpretError("spectra and labels differ in length")
    per_night = np.array([np.asarray(s, dtype=float).mean(axis=0) for s in spectra])
    if per_night.ndim != 2 or per_night.shape[1] != freqs.size:
        raise InterpretError(f"spectra must have {freqs.size} frequency bins")
    if np.any(np.diff(freqs) <= 0) or freqs[-1] > 32.0:
        raise InterpretError("frequencies must be ascending and at most 32 Hz")
    a, b = per_night[labels], per_night[~labels]
    if len(a) < MIN_COHORT_NIGHTS or len(b) < MIN_COHORT_NIGHTS:
        raise InterpretError(f"need at least {MIN_COHORT_NIGHTS} nights per cohort, got {len(a)} and {len(b)}")
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    d = ma - mb
    peak = float(np.abs(d).max())
    diff = d / peak if peak > 0 else np.zeros_like(d)
    tests = {}
    for name, band in (bands or {"SO": SO_BAND, "Beta": BETA_BAND}).items():
        sel = _in_band(freqs, band)
        tests[name] = welch_t(a[:, sel].mean(axis=1), b[:, sel].mean(axis=1))
    return SpectraDiff(freqs, diff, peak, ma, mb, _boot_mean_ci(a, n_boot, seed),
                       _boot_mean_ci(b, n_boot, seed + 1), len(a), len(b), tests)


# --- REM latency ---------------------------------------------------------------

def score_rem_correlation(scores, rem_latency_min) -> TestResult:
    """Pearson r between scores and REM latency; NaN latencies are dropped."""
    s = np.asarray(scores, dtype=float)
    lat = np.asarray(rem_latency_min, dtype=float)
    if s.shape != lat.shape:
        raise MetricError("scores and latencies must pair up")
    keep = ~(np.isnan(s) | np.isnan(lat))
    if keep.sum() < 3:
        raise MetricError("need at least 3 score/latency pairs")
    return pearson_r(s[keep], lat[keep])


def rem_latency_min(hyp: Hypnogram) -> Optional[float]:
    """Minutes from sleep onset to the first REM epoch, ``None`` without REM or sleep."""
    ep = hyp.epochs
    sleep = np.flatnonzero(ep != 0)
    rem = np.flatnonzero(ep == REM)
    if sleep.size == 0 or rem.size == 0:
        return None
    return float((rem[0] - sleep[0]) * hyp.epoch_len_s / 60.0)


@dataclass
class EarlySleepResult:
    so: TestResult
    beta: TestResult
    so_beta: TestResult
    n_used: int
    n_skipped: int


def early_sleep_power(spec: Spectrogram, hyp: Hypnogram, minutes: float = EARLY_SLEEP_MIN):
    """(SO power, beta power) over the first ``minutes`` of NREM before REM onset.

    Returns ``None`` when the night has less NREM than that before its first
    REM epoch (or no REM at all).
    """
    if spec.n_windows != len(hyp):
        raise InterpretError(f"{spec.n_windows} spectrogram windows vs {len(hyp)} epochs")
    ep = hyp.epochs
    rem = np.flatnonzero(ep == REM)
    if rem.size == 0:
        return None
    need = int(round(minutes * 60.0 / hyp.epoch_len_s))
    nrem = np.flatnonzero(np.isin(ep[:rem[0]], (N1, N2, N3)))
    if nrem.size < need:
        return None
    rows = spec.power[nrem[:need]]
    f = spec.freqs_hz
    so = rows[:, _in_band(f, SO_BAND)].mean()
    beta = rows[:, (f >= BETA_BAND[0]) & (f <= BETA_BAND[1])].mean()
    return float(so), float(beta)


def early_sleep_power_vs_rem(spectrograms, hypnograms) -> EarlySleepResult:
    """Correlate early-sleep SO, beta, and SO+beta power with REM latency across nights."""
    so, beta, lat = [], [], []
    skipped = 0
    for spec, hyp in zip(spectrograms, hypnograms):
        p = early_sleep_power(spec, hyp)
        if p is None:
            skipped += 1
            continue
        so.append(p[0])
        beta.append(p[1])
        lat.append(rem_latency_min(hyp))
    if not lat:
        raise InterpretError("no nights with an hour of NREM before REM")
    so, beta, lat = np.array(so), np.array(beta), np.array(lat)
    return EarlySleepResult(pearson_r(so, lat), pearson_r(beta, lat), pearson_r(so + beta, lat),
                            len(lat), skipped)


# --- latent projection ---------------------------------------------------------------

@dataclass
class Projection:
    coords: np.ndarray  # (n, 2)
    explained: np.ndarray  # variance fraction of PC1, PC2
    components: np.ndarray  # (2, D)
    mean: np.ndarray


def latent_projection(latents) -> Projection:
    """Project latents onto their top two principal components."""
    X = np.asarray(latents, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise InterpretError("need at least 3 latent vectors")
    mu = X.mean(axis=0)
    Xc = X - mu
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    if total <= 1e-24 * max(1.0, float(np.abs(X).max()) ** 2):
        raise InterpretError("latents are degenerate (all equal)")
    k = min(2, vt.shape[0])
    comps = np.zeros((2, X.shape[1]))
    comps[:k] = vt[:k]
    expl = np.zeros(2)
    expl[:k] = var[:k] / total
    return Projection(Xc @ comps.T, expl, comps, mu)


# --- longitudinal ---------------------------------------------------------------

@dataclass
class Trajectory:
    date_index: np.ndarray
    z: np.ndarray
    smoothed: np.ndarray
    window_nights: int

    def first_crossing(self, threshold: float, start: Optional[int] = None) -> Optional[int]:
        """First date index (at or after ``start``) where the smoothed score reaches ``threshold``
        after having been below it."""
        below = False
        for d, s in zip(self.date_index, self.smoothed):
            if start is not None and d < start:
                below = s < threshold
                continue
            if s < threshold:
                below = True
            elif below:
                return int(d)
        return None


def longitudinal_smooth(date_index, z, window_nights: int = 14) -> Trajectory:
    """Centered moving average over the nights within ``window_nights / 2`` of each date.

    Missing dates simply contribute nothing, so gaps shorten the effective
    window rather than being filled.
    """
    d = np.asarray(date_index, dtype=np.int64)
    z = np.asarray(z, dtype=float)
    if d.shape != z.shape or d.ndim != 1 or d.size == 0:
        raise InterpretError("date_index and z must be equal-length 1-D with at least one night")
    order = np.argsort(d, kind="stable")
    d, z = d[order], z[order]
    if np.any(np.diff(d) == 0):
        raise InterpretError("duplicate date_index")
    half = window_nights / 2.0
    lo = np.searchsorted(d, d - half, side="left")
    hi = np.searchsorted(d, d + half, side="right")
    csum = np.r_[0.0, np.cumsum(z)]
    sm = (csum[hi] - csum[lo]) / (hi - lo)
    sm = np.clip(sm, z.min(), z.max())  # guard cumulative-sum rounding
    return Trajectory(d, z, sm, window_nights)


# --- CSV export ------------------------------------------------------------------

def write_spectra_csv(path, sd: SpectraDiff) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz", "diff", "mean_a", "mean_a_lo", "mean_a_hi", "mean_b", "mean_b_lo", "mean_b_hi"])
        for i, f in enumerate(sd.freqs_hz):
            w.writerow([repr(float(v)) for v in (f, sd.diff[i], sd.mean_a[i], sd.ci_a[0, i], sd.ci_a[1, i],
                                                 sd.mean_b[i], sd.ci_b[0, i], sd.ci_b[1, i])])
    return path


def write_trajectory_csv(path, traj: Trajectory, participant_id: str = "") -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "date_index", "z", "smoothed_z", "window_nights"])
        for d, z, s in zip(traj.date_index, traj.z, traj.smoothed):
            w.writerow([participant_id, int(d), repr(float(z)), repr(float(s)), traj.window_nights])
    return path
