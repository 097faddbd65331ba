"""Sleep-architecture and EEG band features for the baseline classifiers.

Column order of the flat feature vectors is fixed by :data:`SLEEP_COLUMNS`
and :data:`BAND_COLUMNS`; :func:`write_feature_csv` writes them in that order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import sosfiltfilt, butter

from .data import N2, N3, REM, STAGES, W, Hypnogram
from .dsp import Signal, Spectrogram

BANDS = {
    "SO": (0.0, 1.0), "Delta": (1.0, 4.0), "Theta": (4.0, 8.0), "Alpha": (8.0, 12.0),
    "Sigma": (12.0, 16.0), "BetaI": (16.0, 24.0), "BetaII": (24.0, 32.0),
}
BAND_NAMES = tuple(BANDS)
CYCLE_STAGES = (N2, N3, REM)
FIRST_CYCLE_FALLBACK_MIN = 90.0


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class SleepFeatures:
    durations_min: np.ndarray  # W, N1, N2, N3, REM
    total_sleep_min: float
    sleep_onset_latency_min: float
    rem_onset_latency_min: Optional[float]
    waso_min: float
    n_awakenings: int
    sleep_efficiency: float
    transitions: np.ndarray  # 5 x 5 counts, row = from-stage
    age: float
    sex: str

    def vector(self) -> np.ndarray:
        """Flat row in :data:`SLEEP_COLUMNS` order; absent REM latency is NaN."""
        rl = np.nan if self.rem_onset_latency_min is None else self.rem_onset_latency_min
        head = [*self.durations_min, self.total_sleep_min, self.sleep_onset_latency_min, rl,
                self.waso_min, self.n_awakenings, self.sleep_efficiency]
        tail = [self.age, 1.0 if self.sex == "M" else 0.0]
        return np.array(head + list(self.transitions.ravel()) + tail, dtype=np.float64)


SLEEP_COLUMNS = tuple(
    [f"dur_{s}_min" for s in STAGES]
    + ["total_sleep_min", "sleep_onset_latency_min", "rem_latency_min", "waso_min",
       "n_awakenings", "sleep_efficiency"]
    + [f"trans_{a}_{b}" for a in STAGES for b in STAGES]
    + ["age", "sex_male"]
)


def sleep_features(hyp: Hypnogram, age: float = float("nan"), sex: str = "F") -> SleepFeatures:
    """Sleep-architecture summary of one night.

    Sleep onset is the first non-wake epoch. REM latency counts from onset to
    the first REM epoch and is ``None`` for nights without REM. WASO and
    awakenings cover wake between onset and the last sleep epoch.
    """
    ep = hyp.epochs
    epoch_min = hyp.epoch_len_s / 60.0
    sleep_idx = np.flatnonzero(ep != W)
    if sleep_idx.size == 0:
        raise FeatureError("hypnogram has no sleep epochs; sleep onset undefined")
    onset, last = int(sleep_idx[0]), int(sleep_idx[-1])
    durations = np.bincount(ep, minlength=5)[:5] * epoch_min
    rem_idx = np.flatnonzero(ep == REM)
    rem_lat = float((rem_idx[0] - onset) * epoch_min) if rem_idx.size else None
    span = ep[onset:last + 1] == W
    waso = float(span.sum() * epoch_min)
    n_awk = int(np.count_nonzero(span[1:] & ~span[:-1])) if span.size else 0
    trans = np.zeros((5, 5), dtype=np.int64)
    np.add.at(trans, (ep[:-1], ep[1:]), 1)
    tst = float(sleep_idx.size * epoch_min)
    return SleepFeatures(
        durations_min=durations, total_sleep_min=tst, sleep_onset_latency_min=float(onset * epoch_min),
        rem_onset_latency_min=rem_lat, waso_min=waso, n_awakenings=n_awk,
        sleep_efficiency=tst / (len(ep) * epoch_min), transitions=trans, age=float(age), sex=sex,
    )


@dataclass(frozen=True)
class BandFeatures:
    whole_night: np.ndarray  # (7,)
    per_stage: np.ndarray  # (5, 7), NaN where the stage is absent
    cycle1_ratio: np.ndarray  # (3, 7) for N2, N3, REM; NaN where absent
    relative: np.ndarray  # (7,) whole-night band power / total power

    def vector(self) -> np.ndarray:
        """63 values then 8 presence flags, in :data:`BAND_COLUMNS` order."""
        flags = np.r_[~np.isnan(self.per_stage[:, 0]), ~np.isnan(self.cycle1_ratio[:, 0])]
        return np.r_[self.whole_night, self.per_stage.ravel(), self.cycle1_ratio.ravel(),
                     flags.astype(np.float64)]


BAND_COLUMNS = tuple(
    [f"pow_{b}" for b in BAND_NAMES]
    + [f"pow_{s}_{b}" for s in STAGES for b in BAND_NAMES]
    + [f"c1ratio_{STAGES[s]}_{b}" for s in CYCLE_STAGES for b in BAND_NAMES]
    + [f"has_{s}" for s in STAGES] + [f"has_c1_{STAGES[s]}" for s in CYCLE_STAGES]
)


def first_cycle_mask(hyp: Hypnogram) -> np.ndarray:
    """Epochs from sleep onset through the end of the first REM run.

    Without REM the first 90 minutes after onset are used.
    """
    ep = hyp.epochs
    mask = np.zeros(len(ep), dtype=bool)
    sleep_idx = np.flatnonzero(ep != W)
    if sleep_idx.size == 0:
        return mask
    onset = int(sleep_idx[0])
    rem_idx = np.flatnonzero(ep == REM)
    if rem_idx.size:
        end = int(rem_idx[0])
        while end + 1 < len(ep) and ep[end + 1] == REM:
            end += 1
    else:
        end = onset + int(round(FIRST_CYCLE_FALLBACK_MIN * 60.0 / hyp.epoch_len_s)) - 1
    mask[onset:end + 1] = True
    return mask


def _band_matrix(spec: Spectrogram) -> np.ndarray:
    """(n_windows, 7) band powers; the last band includes its upper edge."""
    f = spec.freqs_hz
    out = np.empty((spec.n_windows, len(BANDS)))
    for j, (lo, hi) in enumerate(BANDS.values()):
        sel = (f >= lo) & ((f < hi) if j < len(BANDS) - 1 else (f <= hi))
        if not sel.any():
            raise FeatureError(f"spectrogram has no bins in band {lo}-{hi} Hz")
        out[:, j] = spec.power[:, sel].mean(axis=1)
    return out


def eeg_band_features(spec: Spectrogram, hyp: Hypnogram) -> BandFeatures:
    """Whole-night, per-stage, and first-cycle band powers."""
    if spec.n_windows != len(hyp):
        raise FeatureError(f"{spec.n_windows} spectrogram windows vs {len(hyp)} hypnogram epochs")
    bp = _band_matrix(spec)
    ep = hyp.epochs
    whole = bp.mean(axis=0)
    per_stage = np.full((5, len(BANDS)), np.nan)
    for s in range(5):
        if np.any(ep == s):
            per_stage[s] = bp[ep == s].mean(axis=0)
    c1 = first_cycle_mask(hyp)
    ratio = np.full((len(CYCLE_STAGES), len(BANDS)), np.nan)
    for i, s in enumerate(CYCLE_STAGES):
        sel = c1 & (ep == s)
        if sel.any():
            ratio[i] = bp[sel].mean(axis=0) / per_stage[s]
    total = whole.sum()
    relative = whole / total if total > 0 else np.full(len(BANDS), np.nan)
    return BandFeatures(whole, per_stage, ratio, relative)


# --- respiration texture ---------------------------------------------------------

def breath_onsets(sig: Signal, band_hz=(0.05, 1.0)) -> np.ndarray:
    """Breath onset times (s): upward zero crossings of the band-passed signal."""
    hi = min(band_hz[1], 0.45 * sig.rate_hz)
    sos = butter(2, (band_hz[0], hi), btype="bandpass", fs=sig.rate_hz, output="sos")
    x = sosfiltfilt(sos, np.asarray(sig.samples, dtype=np.float64))
    idx = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
    # linear interpolation of the crossing inside the sample interval
    frac = -x[idx] / (x[idx + 1] - x[idx])
    return (idx + frac) / sig.rate_hz


RESP_COLUMNS = ("breath_rate_bpm", "interval_cv", "interval_lag1")


def resp_texture(sig: Signal, hyp: Optional[Hypnogram] = None, stage: Optional[int] = None) -> np.ndarray:
    """Breathing rate, breath-interval CV, and lag-1 interval autocorrelation.

    With ``hyp`` and ``stage`` only intervals starting in that stage count;
    statistics are computed within contiguous runs so stage boundaries do not
    leak into the autocorrelation.
    """
    t = breath_onsets(sig)
    iv = np.diff(t)
    starts = t[:-1]
    if hyp is not None and stage is not None:
        ep = np.minimum((starts // hyp.epoch_len_s).astype(int), len(hyp) - 1)
        keep = hyp.epochs[ep] == stage
    else:
        keep = np.ones(iv.size, dtype=bool)
    if keep.sum() < 3:
        return np.full(3, np.nan)
    sel = iv[keep]
    pair = keep[:-1] & keep[1:]
    a, b = iv[:-1][pair], iv[1:][pair]
    lag1 = float(np.corrcoef(a, b)[0, 1]) if a.size > 2 and a.std() > 0 and b.std() > 0 else np.nan
    return np.array([60.0 / sel.mean(), sel.std() / sel.mean(), lag1])


# --- CSV -------------------------------------------------------------------------

def write_feature_csv(path, keys, matrix, columns) -> Path:
    """Rows ``participant_id, night_id, <columns...>``; NaN written as empty."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != len(columns) or matrix.shape[0] != len(keys):
        raise FeatureError("feature matrix shape does not match keys/columns")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", "night_id", *columns])
        for (pid, nid), row in zip(keys, matrix):
            w.writerow([pid, nid, *("" if np.isnan(v) else repr(float(v)) for v in row)])
    return path


def read_feature_csv(path):
    """Inverse of :func:`write_feature_csv`: ``(keys, matrix, columns)``."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["participant_id", "night_id"]:
            raise FeatureError(f"{path}: unexpected header")
        keys, rows = [], []
        for rec in r:
            keys.append((rec[0], rec[1]))
            rows.append([float(v) if v else np.nan for v in rec[2:]])
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 2)
    return keys, matrix, tuple(header[2:])


# --- random-forest baselines ------------------------------------------------------

BASELINE_KINDS = ("sleep", "eeg")


def night_sleep_vector(night) -> np.ndarray:
    if night.hypnogram is None:
        raise FeatureError(f"night {night.key} has no hypnogram")
    return sleep_features(night.hypnogram, night.age_years, night.sex).vector()


def night_band_vector(night, spec: Spectrogram) -> np.ndarray:
    """Band features on the first ``spec.n_windows`` epochs of the night's hypnogram."""
    if night.hypnogram is None:
        raise FeatureError(f"night {night.key} has no hypnogram")
    hyp = night.hypnogram
    n = min(spec.n_windows, len(hyp))
    spec = Spectrogram(spec.power[:n], spec.freqs_hz, spec.window_s)
    return eeg_band_features(spec, Hypnogram(hyp.epochs[:n], hyp.epoch_len_s)).vector()


def spectrogram_from_target(target: np.ndarray, floor: float = 1e-3) -> Spectrogram:
    """Undo the pipeline's per-token ``log10(power + floor)`` 1 Hz band targets."""
    power = np.maximum(10.0 ** target.astype(np.float64).reshape(-1, 32) - floor, 0.0)
    return Spectrogram(power, np.arange(32) + 0.5, 30.0)


def feature_matrix(cohort, kind: str, data: Optional[dict] = None):
    """``(keys, X, columns)`` for every night; ``eeg`` needs preprocessed ``data`` targets."""
    keys = [n.key for n in cohort.nights]
    if kind == "sleep":
        return keys, np.array([night_sleep_vector(n) for n in cohort.nights]), SLEEP_COLUMNS
    if kind == "eeg":
        if data is None:
            raise FeatureError("eeg baseline needs preprocessed band-power targets")
        rows = []
        for n in cohort.nights:
            t = data[n.key].target
            if t is None:
                raise FeatureError(f"night {n.key} has no EEG target")
            rows.append(night_band_vector(n, spectrogram_from_target(t)))
        return keys, np.array(rows), BAND_COLUMNS
    raise FeatureError(f"unknown baseline kind {kind!r}; choose from {BASELINE_KINDS}")


def baseline_cv(cohort, plan, kind: str = "sleep", data: Optional[dict] = None, n_trees: int = 1000,
                max_depth: int = 10, seed: int = 0) -> tuple:
    """Random-forest scores under the same folds as the transformer.

    Returns ``(cv_predictions, holdout_predictions)`` as
    :class:`~somnadhere.pipeline.PredictionScore` lists; hold-out scores are
    averaged over the fold forests.
    """
    from .forest import rf_predict, rf_train
    from .pipeline import PredictionScore

    keys, X, _ = feature_matrix(cohort, kind, data)
    nights = cohort.nights
    y = np.array([n.label for n in nights], dtype=float)
    pid = np.array([n.participant_id for n in nights])
    hold = np.isin(pid, list(plan.holdout))
    z = np.full(len(nights), np.nan)
    zh = np.zeros(len(nights))
    for i, fold in enumerate(plan.folds):
        tr = np.isin(pid, list(fold.train))
        te = np.isin(pid, list(fold.test))
        forest = rf_train(X[tr], y[tr], n_trees=n_trees, max_depth=max_depth, seed=seed * 1000 + i)
        z[te] = rf_predict(forest, X[te])
        if hold.any():
            zh[hold] += rf_predict(forest, X[hold]) / plan.k
    mk = lambda j, v: PredictionScore(nights[j].participant_id, nights[j].night_id, nights[j].phase_id,
                                      float(v), nights[j].label)
    cv = [mk(j, z[j]) for j in range(len(nights)) if not np.isnan(z[j])]
    ho = [mk(j, zh[j]) for j in range(len(nights)) if hold[j]]
    return cv, ho
