"""Evaluation bundle: prediction/metadata join, metric tables, and SVG figures.

Figures use matplotlib (imported lazily, Agg backend) with SVG ids salted
and dates suppressed so reruns produce identical files.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import stats
from .data import ANTIDEPRESSANT_CLASSES, MedClass
from .pipeline import aggregate_scores
from .stats import DDD_MG, ScoredUnit

log = logging.getLogger(__name__)

MIN_JOIN_FRACTION = 0.9


class ReportError(RuntimeError):
    pass


def class_key(meds) -> str:
    """Fine-grained class name; atypical antidepressants are named by drug."""
    if meds.med_class == MedClass.ATYPICAL and meds.drug:
        return meds.drug.capitalize()
    return meds.med_class.value


def _dose_ratio(meds) -> Optional[float]:
    if meds.drug and meds.dose_mg and meds.drug.lower() in DDD_MG:
        return stats.ddd_normalize(meds.drug, meds.dose_mg)
    return None


def join_units(preds, cohort):
    """Aggregate predictions per (participant, phase) and attach cohort metadata.

    Returns ``(units, failures)``; a prediction whose night is missing from
    the cohort is a failure. Raises :class:`ReportError` when fewer than 90%
    of predictions join.
    """
    nights = {n.key: n for n in cohort.nights}
    ok, failures = [], []
    for p in preds:
        if (p.participant_id, p.night_id) in nights:
            ok.append(p)
        else:
            failures.append({"participant_id": p.participant_id, "night_id": p.night_id,
                             "reason": "night not in cohort"})
    if preds and len(ok) < MIN_JOIN_FRACTION * len(preds):
        raise ReportError(f"only {len(ok)} of {len(preds)} predictions join the cohort metadata")
    for f in failures:
        log.warning("join failure %s/%s: %s", f["participant_id"], f["night_id"], f["reason"])
    by_unit = defaultdict(list)
    for p in ok:
        by_unit[(p.participant_id, p.phase_id)].append(nights[(p.participant_id, p.night_id)])
    units = []
    for a in aggregate_scores(ok):
        ns = by_unit[(a.participant_id, a.phase_id)]
        meds = ns[0].meds
        ahis = [n.ahi for n in ns if n.ahi is not None]
        units.append(ScoredUnit(
            participant_id=a.participant_id, phase_id=a.phase_id, z=a.z, label=a.label,
            med_class=class_key(meds), drug=meds.drug, dose_ratio=_dose_ratio(meds),
            co_meds=tuple(c.value for c in meds.co_meds),
            co_antidepressant=any(c in ANTIDEPRESSANT_CLASSES for c in meds.co_meds),
            ahi=float(np.mean(ahis)) if ahis else None, age=ns[0].age_years, sex=ns[0].sex,
        ))
    return units, failures


def _report_dict(units, n_boot, seed, fixed_specificity=None) -> dict:
    z = [u.z for u in units]
    y = [u.label for u in units]
    return stats.evaluate(z, y, n_boot=n_boot, seed=seed, fixed_specificity=fixed_specificity).to_dict()


def _round(obj, digits=12):
    """Round floats for stable JSON; NaN/inf become null."""
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else round(obj, digits)
    if isinstance(obj, dict):
        return {k: _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, digits) for v in obj]
    if isinstance(obj, np.generic):
        return _round(obj.item(), digits)
    return obj


def evaluate_run(cv_preds, holdout_preds, cohort, *, baselines: Optional[dict] = None, n_boot: int = 1000,
                 seed: int = 0, fixed_specificity: Optional[float] = None) -> dict:
    """JSON-ready evaluation of participant-phase aggregates.

    ``baselines`` maps a name to ``(cv_preds, holdout_preds)``.
    """
    units, failures = join_units(cv_preds, cohort)
    out = {"n_units": len(units), "join_failures": failures,
           "cv": _report_dict(units, n_boot, seed, fixed_specificity)}
    if holdout_preds:
        hu, hf = join_units(holdout_preds, cohort)
        out["holdout"] = _report_dict(hu, n_boot, seed, fixed_specificity)
        out["join_failures"] += hf
    tables = stats.subgroup_reports(units, n_boot=n_boot, seed=seed, fixed_specificity=fixed_specificity)
    out["subgroups"] = {k: t.to_dict() for k, t in tables.items()}
    out["baselines"] = {}
    for name, (bcv, bho) in (baselines or {}).items():
        bu, _ = join_units(bcv, cohort)
        entry = {"cv": _report_dict(bu, n_boot, seed, fixed_specificity)}
        if bho:
            entry["holdout"] = _report_dict(join_units(bho, cohort)[0], n_boot, seed, fixed_specificity)
        out["baselines"][name] = entry
    return _round(out), tables, units


def write_subgroup_csv(path, tables: dict) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(stats.SubgroupTable.CSV_COLUMNS)
        for key in stats.GROUP_KEYS:
            if key in tables:
                for row in tables[key].csv_rows():
                    w.writerow(["" if v is None else (repr(round(v, 12)) if isinstance(v, float) else v)
                                for v in row])
    return path


def dump_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_round(obj), indent=2, sort_keys=True) + "\n")
    return path


# --- figures ---------------------------------------------------------------------

def _plt():
    try:
        import matplotlib
    except ImportError as e:
        raise ReportError("figures need matplotlib (pip install 'artifact[report]')") from e
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "somnadhere"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    _plt().close(fig)
    return path


def roc_figure(path, units, label: str = "transformer", extra: Optional[dict] = None) -> Path:
    """ROC curves; ``extra`` maps a name to more units (baselines)."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, us in [(label, units), *((extra or {}).items())]:
        fpr, tpr, _ = stats.roc_curve([u.z for u in us], [u.label for u in us])
        auc = stats.auroc([u.z for u in us], [u.label for u in us])
        ax.plot(fpr, tpr, label=f"{name} (AUROC {auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set(xlabel="1 - specificity", ylabel="sensitivity", xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def bar_figure(path, table: dict, title: str, ylabel: str = "mean z") -> Path:
    """Mean score per group with +-1 SD whiskers from a serialized subgroup table."""
    plt = _plt()
    rows = table["rows"]
    fig, ax = plt.subplots(figsize=(max(3.0, 0.8 * len(rows) + 1.5), 3.5))
    x = np.arange(len(rows))
    ax.bar(x, [r["mean_z"] for r in rows], yerr=[r["sd_z"] for r in rows], color="0.55", capsize=3)
    ax.set_xticks(x, [r["group"] for r in rows], rotation=30, ha="right", fontsize=8)
    ax.set(ylabel=ylabel, title=title, ylim=(0, 1))
    fig.tight_layout()
    return _save(fig, path)


def confounder_figure(path, units) -> Path:
    """Score distributions of unmedicated, confounder, and antidepressant units."""
    plt = _plt()
    groups = defaultdict(list)
    for u in units:
        if u.label and not u.co_meds:
            groups["Antidepressant"].append(u.z)
        elif not u.label:
            groups[u.med_class].append(u.z)
    names = ["Antidepressant"] + sorted(g for g in groups if g != "Antidepressant")
    names = [n for n in names if groups[n]]
    fig, ax = plt.subplots(figsize=(0.9 * len(names) + 1.5, 3.5))
    ax.boxplot([groups[n] for n in names], showfliers=False)
    ax.set_xticks(np.arange(1, len(names) + 1), names, rotation=30, ha="right", fontsize=8)
    ax.set(ylabel="aggregated z", ylim=(0, 1))
    fig.tight_layout()
    return _save(fig, path)


def spectra_figure(path, freqs, diff) -> Path:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.axhline(0, color="0.7", lw=0.8)
    ax.plot(freqs, diff, marker="o", ms=2)
    ax.set(xlabel="frequency (Hz)", ylabel="normalized power difference", ylim=(-1.05, 1.05), xlim=(0, 32))
    fig.tight_layout()
    return _save(fig, path)


def trajectory_figure(path, trajectories: dict, threshold: Optional[float] = None) -> Path:
    """``trajectories`` maps a participant id to ``(date_index, z, smoothed)``."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for pid, (d, z, s) in sorted(trajectories.items()):
        line, = ax.plot(d, s, label=pid)
        ax.scatter(d, z, s=6, color=line.get_color(), alpha=0.4)
    if threshold is not None:
        ax.axhline(threshold, color="0.4", ls="--", lw=0.8)
    ax.set(xlabel="night", ylabel="z", ylim=(0, 1))
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def latent_figure(path, coords, labels, explained) -> Path:
    plt = _plt()
    coords = np.asarray(coords)
    labels = np.asarray(labels, dtype=bool)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.scatter(*coords[~labels].T, s=5, label="no antidepressant", alpha=0.5)
    ax.scatter(*coords[labels].T, s=5, label="antidepressant", alpha=0.5)
    ax.set(xlabel=f"PC1 ({100 * explained[0]:.1f}%)", ylabel=f"PC2 ({100 * explained[1]:.1f}%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
