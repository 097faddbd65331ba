"""Synthetic cohorts with planted, dose-scaled medication effects.

Every night is driven by an :class:`EffectProfile`. The profile stretches REM
latency, rescales REM and N3 time, shifts wake, boosts slow-oscillation and
beta EEG power, and makes breathing more regular with more strongly
correlated breath intervals. Because the profile is known for every night, downstream
metrics can be checked against ground truth.

Signals are not stored: a generated :class:`~somnadhere.data.NightRecord`
carries loaders that regenerate its respiration and EEG deterministically
from the cohort seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from . import kernels
from .data import (ANTIDEPRESSANT_CLASSES, N1, N2, N3, REM, W, Cohort, Hypnogram, MedClass,
                   MedicationStatus, NightRecord)
from .dsp import Signal
from .stats import DDD_MG, ddd_normalize

RESP_HZ = 10.0
EEG_HZ = 64.0
EPOCH_S = 30.0

DRUGS = {
    "SSRI": ("escitalopram", "citalopram", "fluoxetine", "sertraline", "paroxetine"),
    "SNRI": ("venlafaxine", "desvenlafaxine"),
    "TCA": ("imipramine", "nortriptyline"),
    "Mirtazapine": ("mirtazapine",),
    "Bupropion": ("bupropion",),
}
CONFOUNDER_DRUGS = {
    "Benzodiazepine": ("lorazepam", "clonazepam", "alprazolam"),
    "Hypnotic": ("zolpidem", "eszopiclone"),
    "Anticonvulsant": ("gabapentin", "lamotrigine"),
    "Antipsychotic": ("quetiapine", "olanzapine"),
    "Anticholinergic": ("oxybutynin", "diphenhydramine"),
}


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class EffectProfile:
    rem_latency_mult: float = 1.0
    rem_fraction_mult: float = 1.0
    sws_fraction_mult: float = 1.0
    efficiency_delta: float = 0.0
    so_power_mult: float = 1.0
    beta_power_mult: float = 1.0
    resp_texture_shift: float = 0.0

    def __post_init__(self):
        vals = asdict(self).values()
        if not all(math.isfinite(v) for v in vals):
            raise SynthError("effect profile values must be finite")

    def deviations(self) -> dict:
        """Signed distance of each field from the identity profile."""
        ident = IDENTITY
        return {f.name: getattr(self, f.name) - getattr(ident, f.name) for f in fields(self)}

    def scaled(self, k: float) -> "EffectProfile":
        """Identity plus ``k`` times this profile's deviations, clamped to valid ranges."""
        d = self.deviations()
        return EffectProfile(
            rem_latency_mult=max(1.0, 1.0 + k * d["rem_latency_mult"]),
            rem_fraction_mult=min(1.0, max(0.05, 1.0 + k * d["rem_fraction_mult"])),
            sws_fraction_mult=min(1.5, max(0.05, 1.0 + k * d["sws_fraction_mult"])),
            efficiency_delta=k * d["efficiency_delta"],
            so_power_mult=max(0.05, 1.0 + k * d["so_power_mult"]),
            beta_power_mult=max(0.05, 1.0 + k * d["beta_power_mult"]),
            resp_texture_shift=max(0.0, k * d["resp_texture_shift"]),
        )

    def compose(self, other: "EffectProfile") -> "EffectProfile":
        """Combined effect of two concurrent medications (multiplicative / additive)."""
        return EffectProfile(
            rem_latency_mult=self.rem_latency_mult * other.rem_latency_mult,
            rem_fraction_mult=min(1.0, self.rem_fraction_mult * other.rem_fraction_mult),
            sws_fraction_mult=min(1.5, self.sws_fraction_mult * other.sws_fraction_mult),
            efficiency_delta=self.efficiency_delta + other.efficiency_delta,
            so_power_mult=self.so_power_mult * other.so_power_mult,
            beta_power_mult=self.beta_power_mult * other.beta_power_mult,
            resp_texture_shift=self.resp_texture_shift + other.resp_texture_shift,
        )


IDENTITY = EffectProfile()

# Full-strength profiles at one defined daily dose, before class strength.
_SEROTONERGIC = EffectProfile(
    rem_latency_mult=1.5, rem_fraction_mult=0.6, sws_fraction_mult=0.85, efficiency_delta=0.03,
    so_power_mult=1.5, beta_power_mult=1.5, resp_texture_shift=1.0,
)
BASE_PROFILES = {
    "SSRI": _SEROTONERGIC,
    "SNRI": _SEROTONERGIC,
    "TCA": _SEROTONERGIC,
    # little REM suppression, more slow-wave sleep and continuity
    "Mirtazapine": EffectProfile(1.4, 0.95, 1.3, 0.05, 1.5, 1.3, 1.0),
    # delayed REM onset without less total REM
    "Bupropion": EffectProfile(2.0, 1.0, 1.0, 0.0, 1.5, 1.5, 1.0),
}
CONFOUNDER_PROFILES = {
    "Benzodiazepine": EffectProfile(1.15, 0.95, 0.7, 0.02, 0.9, 1.15, 0.15),
    "Hypnotic": EffectProfile(1.05, 1.0, 0.95, 0.03, 1.0, 1.05, 0.05),
    "Antipsychotic": EffectProfile(1.15, 0.9, 1.1, 0.06, 1.0, 1.0, 0.15),
    "Anticonvulsant": EffectProfile(1.05, 0.9, 1.2, 0.02, 1.05, 1.0, 0.05),
    "Anticholinergic": EffectProfile(1.15, 0.8, 1.0, 0.0, 1.0, 1.0, 0.05),
}

DEFAULT_STRENGTHS = {"SNRI": 1.0, "SSRI": 0.85, "TCA": 0.6, "Mirtazapine": 0.35, "Bupropion": 0.15}
DEFAULT_CLASS_MIX = {
    # antidepressant keys share the positive mass, the rest the negative mass
    "SSRI": 0.45, "SNRI": 0.2, "TCA": 0.15, "Mirtazapine": 0.1, "Bupropion": 0.1,
    "None": 0.7, "Benzodiazepine": 0.06, "Hypnotic": 0.06, "Anticonvulsant": 0.06,
    "Antipsychotic": 0.06, "Anticholinergic": 0.06,
}
POSITIVE_KEYS = tuple(DEFAULT_STRENGTHS)
DOSE_SATURATION = 2.0


def strength_key(meds: MedicationStatus) -> str:
    """Key into class_strengths / BASE_PROFILES; atypicals are keyed by drug."""
    if meds.med_class == MedClass.ATYPICAL:
        drug = (meds.drug or "bupropion").lower()
        return "Mirtazapine" if drug == "mirtazapine" else "Bupropion"
    return meds.med_class.value


def dose_scale(ratio: Optional[float]) -> float:
    """Effect multiplier for a PDD/DDD ratio: sqrt(ratio), flat beyond 2x DDD."""
    if ratio is None:
        return 1.0
    return math.sqrt(min(max(ratio, 0.0), DOSE_SATURATION))


@dataclass
class SynthConfig:
    n_participants: int = 400
    positive_fraction: float = 0.25
    class_mix: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_MIX))
    dose_grid: tuple = (0.5, 1.0, 2.0)
    nights_per_participant: tuple = (3, 3)
    class_strengths: dict = field(default_factory=lambda: dict(DEFAULT_STRENGTHS))
    seed: int = 0
    n_holdout: int = 0
    regimen_change_fraction: float = 0.1
    cotherapy_fraction: float = 0.1
    hours_in_bed: tuple = (6.5, 9.0)

    def validate(self) -> None:
        if self.n_participants < 0 or self.n_holdout < 0:
            raise SynthError("participant counts must be nonnegative")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise SynthError(f"positive_fraction {self.positive_fraction} outside [0, 1]")
        unknown = set(self.class_mix) - set(POSITIVE_KEYS) - set(CONFOUNDER_PROFILES) - {"None"}
        if unknown:
            raise SynthError(f"unknown class_mix keys {sorted(unknown)}")
        if any(v < 0 for v in self.class_mix.values()):
            raise SynthError("class_mix probabilities must be nonnegative")
        if self.positive_fraction > 0 and self._mass(POSITIVE_KEYS) == 0:
            raise SynthError("positive_fraction > 0 but class_mix has no antidepressant mass")
        if self.positive_fraction < 1 and self._mass(None) == 0:
            raise SynthError("positive_fraction < 1 but class_mix has no non-antidepressant mass")
        for name, keys in (("antidepressant", POSITIVE_KEYS), ("non-antidepressant", None)):
            total = self._mass(keys)
            if total > 0 and abs(total - 1.0) > 1e-9:
                raise SynthError(f"class_mix {name} probabilities sum to {total}, not 1")
        lo, hi = self.nights_per_participant
        if not 1 <= lo <= hi:
            raise SynthError("nights_per_participant must be a range with 1 <= lo <= hi")
        if not 4.0 <= self.hours_in_bed[0] <= self.hours_in_bed[1] <= 12.0:
            raise SynthError("hours_in_bed must lie within [4, 12]")
        if any(not 0 <= v <= 1 for v in self.class_strengths.values()):
            raise SynthError("class strengths must lie in [0, 1]")
        if not self.dose_grid or any(r <= 0 for r in self.dose_grid):
            raise SynthError("dose_grid must hold positive DDD ratios")

    def _mass(self, keys) -> float:
        if keys is None:
            return sum(v for k, v in self.class_mix.items() if k not in POSITIVE_KEYS)
        return sum(self.class_mix.get(k, 0.0) for k in keys)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SynthError(f"unknown SynthConfig keys {sorted(unknown)}")
        d = dict(d)
        for k in ("dose_grid", "nights_per_participant", "hours_in_bed"):
            if k in d:
                d[k] = tuple(d[k])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dose_grid", "nights_per_participant", "hours_in_bed"):
            d[k] = list(d[k])
        return d


def drug_profile(meds: MedicationStatus, cfg: Optional[SynthConfig] = None) -> EffectProfile:
    """Planted effect for one medication state, including co-medications."""
    strengths = (cfg.class_strengths if cfg is not None else DEFAULT_STRENGTHS)
    prof = _single_profile(meds.med_class, meds.drug, meds.dose_mg, strengths)
    for co in meds.co_meds:
        drug = "sertraline" if co in ANTIDEPRESSANT_CLASSES and co != MedClass.ATYPICAL else None
        prof = prof.compose(_single_profile(co, drug, None, strengths))
    return prof


def _single_profile(med_class, drug, dose_mg, strengths) -> EffectProfile:
    med_class = MedClass(med_class)
    if med_class == MedClass.NONE:
        return IDENTITY
    if med_class in ANTIDEPRESSANT_CLASSES:
        key = strength_key(MedicationStatus(med_class, drug))
        ratio = ddd_normalize(drug, dose_mg) if (drug and dose_mg and drug.lower() in DDD_MG) else None
        k = strengths.get(key, 0.0) * dose_scale(ratio)
        return BASE_PROFILES[key].scaled(k)
    return CONFOUNDER_PROFILES[med_class.value]


# --- hypnograms ----------------------------------------------------------------

BASE_REM_LATENCY_MIN = 75.0
_CYCLE_MIN = 90.0
_REM_EPISODE_MIN = (12.0, 20.0, 25.0, 30.0)  # later cycles reuse the last value
_N3_CYCLE_MIN = (35.0, 20.0, 5.0)


@dataclass(frozen=True)
class SleeperTrait:
    """Persistent per-person multipliers on sleep architecture."""
    rem_latency: float = 1.0
    rem_fraction: float = 1.0
    sws: float = 1.0


# between-person lognormal sd of each trait
TRAIT_SD = {"rem_latency": 0.15, "rem_fraction": 0.2, "sws": 0.2}


def sleeper_trait(seed: int, p_index: int) -> SleeperTrait:
    rng = np.random.default_rng([seed, p_index, 0, 4])
    return SleeperTrait(**{k: float(rng.lognormal(-0.5 * sd ** 2, sd)) for k, sd in TRAIT_SD.items()})


def _runs(stage: int, minutes: float) -> list:
    n = max(0, int(round(minutes * 60.0 / EPOCH_S)))
    return [stage] * n


def gen_hypnogram(profile: EffectProfile, duration_h: float, rng: np.random.Generator,
                  age_years: float = 50.0, trait: Optional[SleeperTrait] = None) -> Hypnogram:
    """Semi-Markov sleep-cycle hypnogram.

    Layout: sleep-onset wake, then a first NREM period (N1, N2, N3, N2) whose
    length is the REM latency, then REM, then ~90 min cycles whose REM share
    grows across the night and N3 share fades. Wake bouts are written over
    light-sleep epochs afterwards so REM timing is preserved. ``trait``
    scales REM latency, REM episode length, and N3 for this sleeper.
    """
    trait = trait or SleeperTrait()
    if not 4.0 <= duration_h <= 12.0:
        raise SynthError(f"duration_h {duration_h} outside [4, 12]")
    n_ep = int(round(duration_h * 3600.0 / EPOCH_S))
    sws_mult = (profile.sws_fraction_mult * trait.sws
                * float(np.clip(1.0 - 0.006 * (age_years - 50.0), 0.6, 1.3)))
    sol = float(np.clip(rng.lognormal(math.log(12.0), 0.5), 2.0, 60.0))
    latency = (BASE_REM_LATENCY_MIN * rng.lognormal(-0.5 * 0.3 ** 2, 0.3) * profile.rem_latency_mult
               * trait.rem_latency)
    # first REM always lands before the final 20 min of the night
    latency = min(max(latency, 10.0), duration_h * 60.0 - sol - 20.0)

    seq = _runs(W, sol)
    n1 = rng.uniform(3.0, 7.0)
    n3 = min(_N3_CYCLE_MIN[0] * sws_mult * rng.uniform(0.8, 1.2), max(0.0, latency - n1 - 15.0))
    n2_early = min(15.0, max(0.0, latency - n1 - n3))
    n2_late = max(0.0, latency - n1 - n3 - n2_early)
    seq += _runs(N1, n1) + _runs(N2, n2_early) + _runs(N3, n3) + _runs(N2, n2_late)
    cycle = 0
    while len(seq) < n_ep:
        rem_base = _REM_EPISODE_MIN[min(cycle, len(_REM_EPISODE_MIN) - 1)]
        rem = rem_base * profile.rem_fraction_mult * trait.rem_fraction * rng.uniform(0.8, 1.2)
        seq += _runs(REM, max(rem, EPOCH_S / 60.0))
        cycle += 1
        nrem = _CYCLE_MIN * rng.uniform(0.9, 1.1) - rem  # cycle length independent of REM
        n3c = _N3_CYCLE_MIN[cycle] * sws_mult * rng.uniform(0.7, 1.3) if cycle < len(_N3_CYCLE_MIN) else 0.0
        n3c = min(n3c, 0.6 * nrem)
        n1c = rng.uniform(1.0, 4.0)
        n2c = max(nrem - n3c - n1c, 0.0)
        seq += _runs(N1, n1c) + _runs(N2, 0.5 * n2c) + _runs(N3, n3c) + _runs(N2, 0.5 * n2c)
    ep = np.array(seq[:n_ep], dtype=np.int8)

    # wake after sleep onset, written over N1/N2 only
    onset = int(np.argmax(ep != W))
    waso_frac = max(0.0, rng.uniform(0.05, 0.15) - profile.efficiency_delta)
    target = int(round(waso_frac * (n_ep - onset)))
    light = np.flatnonzero((ep[onset:] == N1) | (ep[onset:] == N2)) + onset
    placed = 0
    guard = 0
    while placed < target and light.size and guard < 200:
        guard += 1
        start = int(rng.choice(light))
        length = int(rng.integers(2, 20))
        span = np.arange(start, min(start + length, n_ep))
        span = span[(ep[span] == N1) | (ep[span] == N2)]
        span = span[: target - placed]
        ep[span] = W
        placed += span.size
    return Hypnogram(ep, EPOCH_S)


# --- respiration -----------------------------------------------------------------

# breaths/min, interval coefficient of variation, amplitude per stage W, N1, N2, N3, REM
_RESP_RATE = np.array([16.0, 15.0, 14.0, 13.0, 17.0])
_RESP_CV = np.array([0.25, 0.14, 0.10, 0.05, 0.28])
_RESP_AMP = np.array([1.2, 1.0, 1.0, 1.1, 0.8])


def texture_params(shift: float) -> tuple:
    """(cv multiplier, breath-interval AR(1) coefficient) for a texture shift.

    Negative shifts (irregular breathers) are allowed down to -0.6.
    """
    s = min(max(shift, -0.6), 1.5)
    return 1.0 - 0.4 * s, 0.15 + 0.5 * s


def gen_respiration(hyp: Hypnogram, profile: EffectProfile, rng: np.random.Generator,
                    rate_hz: float = RESP_HZ, texture_offset: float = 0.0) -> Signal:
    """Breath-by-breath respiratory effort at ``rate_hz``.

    Stage sets rate, breath-interval variability, and depth; wake adds
    movement bursts. The texture shift lowers interval variability and raises
    the lag-1 correlation of successive intervals in every stage.
    ``texture_offset`` adds the sleeper's own deviation to the planted shift.
    """
    n_ep = len(hyp)
    total_s = n_ep * hyp.epoch_len_s
    n = int(round(total_s * rate_hz))
    cv_mult, rho = texture_params(profile.resp_texture_shift + texture_offset)
    rate = _RESP_RATE[hyp.epochs] + rng.normal(0.0, 1.2)
    rate = np.maximum(rate, 6.0)
    cv = _RESP_CV[hyp.epochs] * cv_mult
    max_breaths = int(total_s / (60.0 / rate.max() * 0.3)) + 2
    e = lfilter([math.sqrt(1.0 - rho ** 2)], [1.0, -rho], rng.normal(size=max_breaths))
    onsets = kernels.breath_onsets(np.ascontiguousarray(rate, dtype=np.float64),
                                   np.ascontiguousarray(cv, dtype=np.float64),
                                   float(hyp.epoch_len_s), float(total_s), e)
    t = np.arange(n) / rate_hz
    k = np.arange(len(onsets) + 1, dtype=np.float64)
    last = onsets[-1] + 60.0 / rate[-1]
    phase = 2 * np.pi * np.interp(t, np.r_[onsets, max(last, t[-1] + 1e-6)], k)
    stage_at = hyp.epochs[np.minimum((t // hyp.epoch_len_s).astype(int), n_ep - 1)]
    breath_amp = np.exp(rng.normal(0.0, 0.1, size=len(onsets) + 1))
    amp = _RESP_AMP[stage_at] * breath_amp[np.minimum(phase.astype(int) // 7, len(breath_amp) - 1)]
    amp = amp * rng.lognormal(0.0, 0.2)
    x = amp * (np.sin(phase) + 0.25 * np.sin(2 * phase))
    # movement bursts in wake
    wake_ep = np.flatnonzero(hyp.epochs == W)
    if wake_ep.size:
        hit = wake_ep[rng.random(wake_ep.size) < 0.3]
        for ep_i in hit:
            start = int((ep_i * hyp.epoch_len_s + rng.uniform(0, 20)) * rate_hz)
            length = int(rng.uniform(2, 8) * rate_hz)
            burst = np.convolve(rng.normal(0, 3.0, length), np.ones(5) / 5, mode="same")
            x[start:start + length] += burst[: max(0, min(length, n - start))]
    drift = np.cumsum(rng.normal(0.0, 0.002, n))
    x = x + drift + rng.normal(0.0, 0.05, n)
    return Signal(x.astype(np.float32), rate_hz)


# --- EEG -------------------------------------------------------------------------

BAND_EDGES = {
    "SO": (0.3, 1.0), "Delta": (1.0, 4.0), "Theta": (4.0, 8.0), "Alpha": (8.0, 12.0),
    "Sigma": (12.0, 16.0), "BetaI": (16.0, 24.0), "BetaII": (24.0, 32.0),
}
# PSD level (uV^2/Hz) per band for W, N1, N2, N3, REM
STAGE_PSD = np.array([
    # SO   Delta Theta Alpha Sigma BetaI BetaII
    [4.0, 4.0, 3.0, 8.0, 2.0, 1.5, 1.0],   # W
    [6.0, 6.0, 6.0, 2.5, 1.5, 1.0, 0.6],   # N1
    [12.0, 12.0, 5.0, 2.0, 4.0, 0.8, 0.5],  # N2
    [40.0, 35.0, 5.0, 1.5, 1.0, 0.5, 0.3],  # N3
    [5.0, 6.0, 8.0, 2.0, 1.0, 1.0, 0.7],   # REM
])


def _band_index(freqs: np.ndarray) -> np.ndarray:
    idx = np.full(freqs.shape, -1)
    for b, (lo, hi) in enumerate(BAND_EDGES.values()):
        idx[(freqs >= lo) & (freqs < hi)] = b
    idx[freqs == 32.0] = len(BAND_EDGES) - 1
    return idx


def gen_eeg(hyp: Hypnogram, profile: EffectProfile, rng: np.random.Generator,
            rate_hz: float = EEG_HZ) -> Signal:
    """Stage-templated band-limited Gaussian EEG at ``rate_hz``.

    Each epoch is synthesized in the frequency domain with random phases and
    the stage's band PSD levels. In sleep stages the SO band amplitude is
    scaled by ``so_power_mult`` and both beta bands by ``beta_power_mult``
    (power scales with their squares).
    """
    n_per = int(round(hyp.epoch_len_s * rate_hz))
    freqs = np.fft.rfftfreq(n_per, 1.0 / rate_hz)
    bidx = _band_index(freqs)
    amp_mult = np.ones((5, len(BAND_EDGES)))
    amp_mult[1:, 0] = profile.so_power_mult
    amp_mult[1:, 5:7] = profile.beta_power_mult
    psd_tab = STAGE_PSD * amp_mult ** 2
    psd = np.where(bidx[None, :] >= 0, psd_tab[:, np.maximum(bidx, 0)], 0.0)  # (5, n_freq)
    night_gain = rng.lognormal(0.0, 0.1)
    ep_gain = rng.lognormal(0.0, 0.08, size=len(hyp)) * night_gain
    s = psd[hyp.epochs] * (ep_gain ** 2)[:, None]
    coef = np.sqrt(s * rate_hz * n_per / 4.0)
    spec = coef * (rng.normal(size=coef.shape) + 1j * rng.normal(size=coef.shape))
    x = np.fft.irfft(spec, n=n_per, axis=1).ravel()
    return Signal(x.astype(np.float32), rate_hz)


# --- cohorts ---------------------------------------------------------------------

@dataclass(frozen=True)
class _NightPlan:
    seed: int
    p_index: int
    n_index: int
    profile: EffectProfile
    texture_offset: float = 0.0


# breathing regularity differs between people and, less, between nights
TEXTURE_TRAIT_SD = 0.2
TEXTURE_NIGHT_SD = 0.1


def _texture_offsets(seed: int, p_index: int, n_nights: int) -> np.ndarray:
    rng = np.random.default_rng([seed, p_index, 0, 3])
    return rng.normal(0.0, TEXTURE_TRAIT_SD) + rng.normal(0.0, TEXTURE_NIGHT_SD, n_nights)


def _signal_loaders(plan: _NightPlan, hyp: Hypnogram):
    def resp():
        rng = np.random.default_rng([plan.seed, plan.p_index, plan.n_index, 1])
        return gen_respiration(hyp, plan.profile, rng, texture_offset=plan.texture_offset).samples

    def eeg():
        rng = np.random.default_rng([plan.seed, plan.p_index, plan.n_index, 2])
        return gen_eeg(hyp, plan.profile, rng).samples

    return resp, eeg


def _pick(rng, mix: dict) -> str:
    keys = sorted(mix)
    p = np.array([mix[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _meds_for(key: str, rng, cfg: SynthConfig, ratio: Optional[float] = None) -> MedicationStatus:
    if key == "None":
        return MedicationStatus()
    if key in POSITIVE_KEYS:
        drug = str(rng.choice(DRUGS[key]))
        ratio = float(rng.choice(cfg.dose_grid)) if ratio is None else ratio
        cls = MedClass.ATYPICAL if key in ("Mirtazapine", "Bupropion") else MedClass(key)
        return MedicationStatus(cls, drug, ratio * DDD_MG[drug])
    return MedicationStatus(MedClass(key), str(rng.choice(CONFOUNDER_DRUGS[key])))


def _participant_regimen(rng, cfg: SynthConfig, positive: bool, n_nights: int, assigned=None) -> list:
    """Medication state per night for one participant.

    ``assigned`` fixes the antidepressant ``(key, dose ratio)`` of a positive participant.
    """
    pos_mix = {k: v for k, v in cfg.class_mix.items() if k in POSITIVE_KEYS}
    neg_mix = {k: v for k, v in cfg.class_mix.items() if k not in POSITIVE_KEYS}
    if not positive:
        meds = _meds_for(_pick(rng, neg_mix), rng, cfg)
        return [(0, meds)] * n_nights
    key, ratio = assigned if assigned is not None else (_pick(rng, pos_mix), None)
    meds = _meds_for(key, rng, cfg, ratio=ratio)
    if rng.random() < cfg.cotherapy_fraction and meds.label:
        co = MedClass.BENZODIAZEPINE if rng.random() < 0.6 else MedClass.SSRI
        meds = replace(meds, co_meds=(co,))
    if n_nights >= 2 and rng.random() < cfg.regimen_change_fraction:
        split = int(rng.integers(1, n_nights))
        kind = rng.choice(["start", "stop", "dose"])
        if kind == "start":
            first, second = MedicationStatus(), meds
        elif kind == "stop":
            first, second = meds, MedicationStatus()
        else:
            other = [r for r in cfg.dose_grid if abs(r * DDD_MG[meds.drug] - meds.dose_mg) > 1e-9]
            new_ratio = float(rng.choice(other)) if other else cfg.dose_grid[0]
            first, second = meds, replace(meds, dose_mg=new_ratio * DDD_MG[meds.drug])
        return [(0, first)] * split + [(1, second)] * (n_nights - split)
    return [(0, meds)] * n_nights


def _gen_participant(cfg: SynthConfig, p_index: int, pid: str, positive: bool, assigned=None) -> list:
    rng = np.random.default_rng([cfg.seed, p_index, 0])
    lo, hi = cfg.nights_per_participant
    n_nights = int(rng.integers(lo, hi + 1))
    age = float(rng.uniform(20.0, 90.0))
    sex = "F" if rng.random() < 0.5 else "M"
    bucket = rng.choice(4, p=[0.4, 0.25, 0.2, 0.15])
    ahi = float(rng.uniform(*[(0, 5), (5, 15), (15, 30), (30.5, 60)][bucket]))
    regimen = _participant_regimen(rng, cfg, positive, n_nights, assigned)
    offsets = _texture_offsets(cfg.seed, p_index, n_nights)
    trait = sleeper_trait(cfg.seed, p_index)
    nights = []
    for j, (phase, meds) in enumerate(regimen):
        night_rng = np.random.default_rng([cfg.seed, p_index, j + 1, 0])
        profile = drug_profile(meds, cfg)
        hours = float(night_rng.uniform(*cfg.hours_in_bed))
        hyp = gen_hypnogram(profile, hours, night_rng, age_years=age, trait=trait)
        plan = _NightPlan(cfg.seed, p_index, j + 1, profile, float(offsets[j]))
        resp, eeg = _signal_loaders(plan, hyp)
        nights.append(NightRecord(
            participant_id=pid, night_id=f"n{j:03d}", phase_id=phase, resp_hz=RESP_HZ,
            n_resp=int(round(len(hyp) * hyp.epoch_len_s * RESP_HZ)), resp_loader=resp,
            meds=meds, age_years=round(age, 3), sex=sex, hypnogram=hyp, ahi=round(ahi, 3),
            eeg_hz=EEG_HZ, eeg_loader=eeg,
        ))
    return nights


def gen_cohort(cfg: SynthConfig) -> Cohort:
    """Deterministic synthetic cohort.

    Participants ``p0000..`` form the cross-validation pool and ``h0000..``
    the external hold-out. Exactly ``round(n * positive_fraction)``
    participants in each pool take an antidepressant for at least one phase.
    Within each antidepressant class the dose grid is dealt round-robin, so
    every dose level sees the same class mix.
    """
    cfg.validate()
    nights = []
    pos_mix = {k: v for k, v in cfg.class_mix.items() if k in POSITIVE_KEYS}
    for prefix, count, offset in (("p", cfg.n_participants, 0), ("h", cfg.n_holdout, 1_000_000)):
        n_pos = int(round(count * cfg.positive_fraction))
        rng = np.random.default_rng([cfg.seed, offset, 7])
        order = rng.permutation(count)
        positive = np.zeros(count, dtype=bool)
        positive[order[:n_pos]] = True
        dealt = {k: int(rng.integers(len(cfg.dose_grid))) for k in sorted(pos_mix)}
        for i in range(count):
            assigned = None
            if positive[i]:
                key = _pick(np.random.default_rng([cfg.seed, offset + i, 5]), pos_mix)
                assigned = (key, float(cfg.dose_grid[dealt[key] % len(cfg.dose_grid)]))
                dealt[key] += 1
            nights += _gen_participant(cfg, offset + i, f"{prefix}{i:04d}", bool(positive[i]), assigned)
    prov = {"seed": cfg.seed, "generator": "somnadhere.synth", "config": cfg.to_dict()}
    return Cohort(nights, prov)


def gen_longitudinal(cfg: SynthConfig, *, n_nights: int = 60, switch_night: int = 30,
                     key: str = "SNRI", ratio: float = 1.0, kind: str = "start",
                     pid: str = "L0000", p_index: int = 2_000_000) -> list:
    """One participant followed nightly through a regimen change.

    ``kind`` is ``"start"`` (off, then on from ``switch_night``) or ``"stop"``.
    """
    rng = np.random.default_rng([cfg.seed, p_index, 0])
    on = _meds_for(key, rng, cfg, ratio=ratio)
    off = MedicationStatus()
    first, second = (off, on) if kind == "start" else (on, off)
    age = float(rng.uniform(30.0, 70.0))
    sex = "F" if rng.random() < 0.5 else "M"
    offsets = _texture_offsets(cfg.seed, p_index, n_nights)
    trait = sleeper_trait(cfg.seed, p_index)
    nights = []
    for j in range(n_nights):
        phase = 0 if j < switch_night else 1
        meds = first if phase == 0 else second
        night_rng = np.random.default_rng([cfg.seed, p_index, j + 1, 0])
        profile = drug_profile(meds, cfg)
        hyp = gen_hypnogram(profile, float(night_rng.uniform(*cfg.hours_in_bed)), night_rng, age, trait)
        resp, eeg = _signal_loaders(_NightPlan(cfg.seed, p_index, j + 1, profile, float(offsets[j])), hyp)
        nights.append(NightRecord(
            participant_id=pid, night_id=f"n{j:03d}", phase_id=phase, resp_hz=RESP_HZ,
            n_resp=int(round(len(hyp) * hyp.epoch_len_s * RESP_HZ)), resp_loader=resp,
            meds=meds, age_years=round(age, 3), sex=sex, hypnogram=hyp, ahi=2.0,
            eeg_hz=EEG_HZ, eeg_loader=eeg,
        ))
    return nights
