"""Cohort data model, on-disk format, and quality control.

A cohort lives on disk as an NDJSON manifest (one header line, then one
object per night) plus one raw little-endian float32 file per signal channel
per night. Signals are loaded lazily: a :class:`NightRecord` carries a loader
callable rather than the samples themselves, so large cohorts never have to
sit in memory at once.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dsp import Signal

logger = logging.getLogger(__name__)

FORMAT_NAME = "somnadhere-cohort"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.ndjson"

STAGES = ("W", "N1", "N2", "N3", "REM")
STAGE_CHARS = "W123R"
W, N1, N2, N3, REM = range(5)

_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class CohortError(ValueError):
    """Base class for cohort validation and I/O problems."""


class MissingSignalError(CohortError):
    pass


class DuplicateNightError(CohortError):
    pass


class SchemaVersionError(CohortError):
    pass


class MedClass(str, Enum):
    NONE = "None"
    SSRI = "SSRI"
    SNRI = "SNRI"
    TCA = "TCA"
    ATYPICAL = "Atypical"
    BENZODIAZEPINE = "Benzodiazepine"
    HYPNOTIC = "Hypnotic"
    ANTICONVULSANT = "Anticonvulsant"
    ANTIPSYCHOTIC = "Antipsychotic"
    ANTICHOLINERGIC = "Anticholinergic"


ANTIDEPRESSANT_CLASSES = frozenset({MedClass.SSRI, MedClass.SNRI, MedClass.TCA, MedClass.ATYPICAL})
CONFOUNDER_CLASSES = (
    MedClass.BENZODIAZEPINE,
    MedClass.HYPNOTIC,
    MedClass.ANTICONVULSANT,
    MedClass.ANTIPSYCHOTIC,
    MedClass.ANTICHOLINERGIC,
)


def is_antidepressant(med_class) -> bool:
    return MedClass(med_class) in ANTIDEPRESSANT_CLASSES


@dataclass(frozen=True)
class Hypnogram:
    """Per-epoch sleep stages stored as integer codes 0..4 (W, N1, N2, N3, REM)."""

    epochs: np.ndarray
    epoch_len_s: float = 30.0

    def __post_init__(self):
        ep = np.asarray(self.epochs, dtype=np.int8)
        if ep.ndim != 1 or ep.size == 0:
            raise CohortError("hypnogram must be a non-empty 1-D sequence")
        if ep.min() < 0 or ep.max() > 4:
            raise CohortError("hypnogram stage codes must be in 0..4")
        object.__setattr__(self, "epochs", ep)

    @classmethod
    def from_string(cls, s: str, epoch_len_s: float = 30.0) -> "Hypnogram":
        try:
            codes = [STAGE_CHARS.index(c) for c in s]
        except ValueError:
            raise CohortError(f"hypnogram string has characters outside {STAGE_CHARS!r}") from None
        return cls(np.array(codes, dtype=np.int8), epoch_len_s)

    def to_string(self) -> str:
        return "".join(STAGE_CHARS[c] for c in self.epochs)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def duration_s(self) -> float:
        return len(self.epochs) * self.epoch_len_s

    @property
    def sleep_s(self) -> float:
        return float(np.count_nonzero(self.epochs != W)) * self.epoch_len_s

    def __eq__(self, other):
        if not isinstance(other, Hypnogram):
            return NotImplemented
        return self.epoch_len_s == other.epoch_len_s and np.array_equal(self.epochs, other.epochs)

    __hash__ = None


@dataclass(frozen=True)
class MedicationStatus:
    """Medication state for one night.

    ``co_meds`` lists additional concurrent medication classes and is only
    used to stratify co-therapy analyses; ``label`` depends on ``med_class``
    alone.
    """

    med_class: MedClass = MedClass.NONE
    drug: Optional[str] = None
    dose_mg: Optional[float] = None
    co_meds: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "med_class", MedClass(self.med_class))
        object.__setattr__(self, "co_meds", tuple(MedClass(c) for c in self.co_meds))
        if self.dose_mg is not None:
            if self.drug is None:
                raise CohortError("dose_mg given without a drug")
            if not self.dose_mg >= 0:
                raise CohortError("dose_mg must be nonnegative")

    @property
    def label(self) -> bool:
        return self.med_class in ANTIDEPRESSANT_CLASSES

    @property
    def is_monotherapy(self) -> bool:
        return not self.co_meds


def _raw_loader(path: Path) -> Callable[[], np.ndarray]:
    def load():
        return np.fromfile(path, dtype="<f4")
    return load


def _array_loader(arr: np.ndarray) -> Callable[[], np.ndarray]:
    return lambda: arr


@dataclass(frozen=True)
class NightRecord:
    participant_id: str
    night_id: str
    phase_id: int
    resp_hz: float
    n_resp: int
    resp_loader: Callable[[], np.ndarray] = field(repr=False, compare=False)
    meds: MedicationStatus = field(default_factory=MedicationStatus)
    age_years: float = 50.0
    sex: str = "F"
    hypnogram: Optional[Hypnogram] = None
    ahi: Optional[float] = None
    eeg_hz: Optional[float] = None
    eeg_loader: Optional[Callable[[], np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.resp_hz > 0:
            raise CohortError("respiration rate must be positive")
        if self.sex not in ("F", "M"):
            raise CohortError(f"sex must be 'F' or 'M', got {self.sex!r}")
        if self.ahi is not None and not self.ahi >= 0:
            raise CohortError("ahi must be nonnegative")
        for name in ("participant_id", "night_id"):
            if not _ID_RE.match(getattr(self, name)):
                raise CohortError(f"{name} {getattr(self, name)!r} is not filename-safe")

    @classmethod
    def from_arrays(cls, participant_id, night_id, resp, resp_hz, *, eeg=None, eeg_hz=None, **kw):
        resp = np.asarray(resp, dtype=np.float32)
        eeg_loader = None
        if eeg is not None:
            if eeg_hz is None:
                raise CohortError("eeg given without eeg_hz")
            eeg_loader = _array_loader(np.asarray(eeg, dtype=np.float32))
        return cls(participant_id, night_id, kw.pop("phase_id", 0), float(resp_hz), len(resp),
                   _array_loader(resp), eeg_hz=eeg_hz, eeg_loader=eeg_loader, **kw)

    @property
    def key(self) -> tuple:
        return (self.participant_id, self.night_id)

    @property
    def label(self) -> bool:
        return self.meds.label

    @property
    def has_eeg(self) -> bool:
        return self.eeg_loader is not None

    @property
    def respiration(self) -> Signal:
        return Signal(self.resp_loader(), self.resp_hz)

    @property
    def eeg(self) -> Optional[Signal]:
        if self.eeg_loader is None:
            return None
        return Signal(self.eeg_loader(), self.eeg_hz)

    @property
    def recording_s(self) -> float:
        return self.n_resp / self.resp_hz

    def sleep_hours(self) -> float:
        """Hypnogram sleep time if scored, otherwise total recording time."""
        if self.hypnogram is not None:
            return self.hypnogram.sleep_s / 3600.0
        return self.recording_s / 3600.0

    def without_eeg(self) -> "NightRecord":
        return replace(self, eeg_hz=None, eeg_loader=None)


@dataclass
class Cohort:
    nights: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nights = sorted(self.nights, key=lambda n: n.key)
        seen = set()
        for n in self.nights:
            if n.key in seen:
                raise DuplicateNightError(f"duplicate (participant, night) key {n.key}")
            seen.add(n.key)

    def __len__(self):
        return len(self.nights)

    def __iter__(self):
        return iter(self.nights)

    def participants(self) -> list:
        return sorted({n.participant_id for n in self.nights})

    def by_participant(self) -> dict:
        out: dict = {}
        for n in self.nights:
            out.setdefault(n.participant_id, []).append(n)
        return out

    def subset(self, participant_ids) -> "Cohort":
        keep = set(participant_ids)
        return Cohort([n for n in self.nights if n.participant_id in keep], dict(self.provenance))


def _manifest_row(n: NightRecord, resp_file: str, eeg_file: Optional[str]) -> dict:
    row = {
        "participant_id": n.participant_id,
        "night_id": n.night_id,
        "phase_id": int(n.phase_id),
        "resp_file": resp_file,
        "resp_hz": n.resp_hz,
        "med_class": n.meds.med_class.value,
        "age": n.age_years,
        "sex": n.sex,
    }
    if eeg_file is not None:
        row["eeg_file"] = eeg_file
        row["eeg_hz"] = n.eeg_hz
    if n.hypnogram is not None:
        row["hypnogram"] = n.hypnogram.to_string()
        if n.hypnogram.epoch_len_s != 30.0:
            row["epoch_len_s"] = n.hypnogram.epoch_len_s
    if n.meds.drug is not None:
        row["drug"] = n.meds.drug
    if n.meds.dose_mg is not None:
        row["dose_mg"] = n.meds.dose_mg
    if n.meds.co_meds:
        row["co_meds"] = [c.value for c in n.meds.co_meds]
    if n.ahi is not None:
        row["ahi"] = n.ahi
    return row


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_cohort(cohort: Cohort, out_dir) -> Path:
    """Write ``cohort`` under ``out_dir`` and return the manifest path.

    Signal files are named ``<participant>__<night>.<channel>.f32``. Existing
    files with the same names are overwritten.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION}
    if cohort.provenance.get("seed") is not None:
        header["seed"] = cohort.provenance["seed"]
    lines = [_dumps(header)]
    for n in cohort.nights:
        stem = f"{n.participant_id}__{n.night_id}"
        resp = np.asarray(n.resp_loader(), dtype="<f4")
        if len(resp) != n.n_resp:
            raise CohortError(f"night {n.key}: respiration length {len(resp)} != declared {n.n_resp}")
        resp_file = f"{stem}.resp.f32"
        resp.tofile(out_dir / resp_file)
        eeg_file = None
        if n.eeg_loader is not None:
            eeg_file = f"{stem}.eeg.f32"
            np.asarray(n.eeg_loader(), dtype="<f4").tofile(out_dir / eeg_file)
        lines.append(_dumps(_manifest_row(n, resp_file, eeg_file)))
    path = out_dir / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


_REQUIRED = ("participant_id", "night_id", "phase_id", "resp_file", "resp_hz", "med_class", "age", "sex")


def _night_from_row(row: dict, base: Path, lineno: int) -> NightRecord:
    missing = [k for k in _REQUIRED if k not in row]
    if missing:
        raise CohortError(f"manifest line {lineno}: missing fields {missing}")
    resp_path = base / row["resp_file"]
    if not resp_path.is_file():
        raise MissingSignalError(f"missing signal file {resp_path}")
    eeg_loader = None
    if row.get("eeg_file") is not None:
        eeg_path = base / row["eeg_file"]
        if not eeg_path.is_file():
            raise MissingSignalError(f"missing signal file {eeg_path}")
        if "eeg_hz" not in row:
            raise CohortError(f"manifest line {lineno}: eeg_file without eeg_hz")
        eeg_loader = _raw_loader(eeg_path)
    hyp = None
    if row.get("hypnogram") is not None:
        hyp = Hypnogram.from_string(row["hypnogram"], row.get("epoch_len_s", 30.0))
    meds = MedicationStatus(
        MedClass(row["med_class"]), row.get("drug"), row.get("dose_mg"), tuple(row.get("co_meds", ()))
    )
    return NightRecord(
        participant_id=row["participant_id"],
        night_id=row["night_id"],
        phase_id=int(row["phase_id"]),
        resp_hz=float(row["resp_hz"]),
        n_resp=os.path.getsize(resp_path) // 4,
        resp_loader=_raw_loader(resp_path),
        meds=meds,
        age_years=float(row["age"]),
        sex=row["sex"],
        hypnogram=hyp,
        ahi=row.get("ahi"),
        eeg_hz=row.get("eeg_hz") if eeg_loader is not None else None,
        eeg_loader=eeg_loader,
    )


def load_cohort(manifest_path) -> Cohort:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CohortError(f"manifest not found: {manifest_path}")
    with manifest_path.open() as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise CohortError("empty manifest (no header line)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CohortError(f"manifest header does not parse: {exc}") from None
    if header.get("format") != FORMAT_NAME:
        raise CohortError(f"not a {FORMAT_NAME} manifest")
    if header.get("version") != FORMAT_VERSION:
        raise SchemaVersionError(
            f"manifest schema version {header.get('version')} != supported {FORMAT_VERSION}"
        )
    base = manifest_path.parent
    nights = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CohortError(f"manifest line {i} does not parse: {exc}") from None
        nights.append(_night_from_row(row, base, i))
    prov = {"manifest": str(manifest_path), "seed": header.get("seed")}
    return Cohort(nights, prov)


def manifest_hash(manifest_path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


def qc_filter(cohort: Cohort, min_sleep_hours: float = 4.0):
    """Drop nights with strictly less than ``min_sleep_hours`` of sleep.

    Returns
    -------
    (Cohort, list of dict)
        The retained nights and one log entry per excluded night.
    """
    kept, log = [], []
    for n in cohort.nights:
        hours = n.sleep_hours()
        if hours < min_sleep_hours:
            source = "hypnogram" if n.hypnogram is not None else "recording"
            log.append({
                "participant_id": n.participant_id,
                "night_id": n.night_id,
                "sleep_hours": hours,
                "reason": f"sleep {hours:.2f} h ({source}) < {min_sleep_hours} h",
            })
        else:
            kept.append(n)
    if log:
        logger.info("qc_filter excluded %d of %d nights", len(log), len(cohort))
    return Cohort(kept, dict(cohort.provenance)), log
