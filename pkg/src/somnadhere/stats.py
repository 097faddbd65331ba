"""Evaluation statistics: AUROC, bootstrap intervals, operating points, group tests.

The Student-t distribution is evaluated through a continued-fraction
regularized incomplete beta so that extremely small p-values (well below
1e-150) stay representable.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "EvalReport",
    "TestResult",
    "auroc",
    "roc_curve",
    "bootstrap_ci",
    "youden_threshold",
    "threshold_at_specificity",
    "ppv_npv_balanced",
    "welch_t",
    "cohens_d",
    "pearson_r",
    "student_t_sf",
    "betainc_reg",
    "DDD_MG",
    "ddd_normalize",
    "ahi_class",
    "AHI_CLASSES",
    "evaluate",
    "GROUP_KEYS",
    "ScoredUnit",
    "SubgroupRow",
    "SubgroupTable",
    "subgroup_report",
    "subgroup_reports",
]


class MetricError(ValueError):
    pass


@dataclass
class TestResult:
    statistic: float
    df: float
    p_value: float
    effect_size: Optional[float] = None
    note: str = ""

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    auroc: float
    auroc_ci: tuple
    threshold: float
    sensitivity: float
    specificity: float
    ppv: float
    ppv_ci: tuple
    npv: float
    npv_ci: tuple
    n_pos: int
    n_neg: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("auroc_ci", "ppv_ci", "npv_ci"):
            d[k] = list(d[k])
        return d


def _split(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be 1-D and the same length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both classes must be present")
    return s, y, n_pos, n_neg


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    s, y, n_pos, n_neg = _split(scores, labels)
    ranks = rankdata(s)  # average ranks resolve ties as 1/2
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) over all distinct score cut points, starting at (0, 0)."""
    s, y, n_pos, n_neg = _split(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[distinct]
    fp = np.cumsum(~y)[distinct]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thr = np.r_[np.inf, s[distinct]]
    return fpr, tpr, thr


def bootstrap_ci(
    metric_fn: Callable[[list], float],
    units: Sequence,
    n: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    max_redraws: int = 100,
) -> tuple:
    """Percentile bootstrap interval of ``metric_fn`` over resampled ``units``.

    Units (typically per-participant aggregates) are resampled with
    replacement. Iteration ``i`` draws from its own generator seeded with
    ``(seed, i)`` so the interval does not depend on evaluation order.
    A resample on which ``metric_fn`` raises :class:`MetricError` (for
    example a single-class draw) is redrawn, at most ``max_redraws`` times.
    """
    units = list(units)
    m = len(units)
    if m == 0:
        raise MetricError("no units to resample")
    vals = np.empty(n)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        for _ in range(max_redraws):
            idx = rng.integers(0, m, size=m)
            try:
                vals[i] = metric_fn([units[j] for j in idx])
                break
            except MetricError:
                continue
        else:
            raise MetricError(f"metric undefined after {max_redraws} redraws")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(vals, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _confusion(s, y, thr):
    pred = s >= thr
    tp = int(np.count_nonzero(pred & y))
    fn = int(np.count_nonzero(~pred & y))
    tn = int(np.count_nonzero(~pred & ~y))
    fp = int(np.count_nonzero(pred & ~y))
    return tp, fn, tn, fp


def youden_threshold(scores, labels) -> tuple:
    """Smallest observed score maximizing J = sensitivity + specificity - 1.

    A night is called positive when its score is ``>= threshold``.
    """
    s, y, n_pos, n_neg = _split(scores, labels)
    cands = np.unique(s)
    # cumulative counts of each class strictly below every candidate
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    fn = np.searchsorted(pos_sorted, cands, side="left")
    tn = np.searchsorted(neg_sorted, cands, side="left")
    tp = n_pos - fn
    # J * n_pos * n_neg, exact in integers
    j_scaled = tp.astype(np.int64) * n_neg + tn.astype(np.int64) * n_pos - n_pos * n_neg
    best = int(np.argmax(j_scaled))  # argmax returns the first (smallest) maximizer
    thr = float(cands[best])
    return thr, tp[best] / n_pos, tn[best] / n_neg


def threshold_at_specificity(scores, labels, specificity: float) -> tuple:
    """Lowest observed threshold whose specificity is at least ``specificity``."""
    s, y, n_pos, n_neg = _split(scores, labels)
    cands = np.unique(s)
    neg_sorted = np.sort(s[~y])
    pos_sorted = np.sort(s[y])
    tn = np.searchsorted(neg_sorted, cands, side="left")
    ok = np.nonzero(tn / n_neg >= specificity)[0]
    if ok.size == 0:
        thr = float(np.nextafter(cands[-1], np.inf))
    else:
        thr = float(cands[ok[0]])
    tp = n_pos - np.searchsorted(pos_sorted, thr, side="left")
    tn_ = np.searchsorted(neg_sorted, thr, side="left")
    return thr, tp / n_pos, tn_ / n_neg


def ppv_npv_balanced(scores, labels, threshold: float, n_boot: int = 1000, seed: int = 0,
                     level: float = 0.95) -> tuple:
    """PPV and NPV under a 1:1 class ratio.

    Every iteration keeps all positives and draws ``n_pos`` negatives without
    replacement. Iterations where a value is undefined (no predicted
    positives, or no predicted negatives) contribute NaN to that value and are
    ignored in its mean and interval.

    Returns
    -------
    (ppv, npv, ppv_ci, npv_ci)
    """
    s, y, n_pos, n_neg = _split(scores, labels)
    if n_pos > n_neg:
        raise MetricError("balanced subsampling needs n_neg >= n_pos")
    pos = s[y]
    neg = s[~y]
    tp = int(np.count_nonzero(pos >= threshold))
    fn = n_pos - tp
    ppv = np.full(n_boot, np.nan)
    npv = np.full(n_boot, np.nan)
    for i in range(n_boot):
        rng = np.random.default_rng([seed, i])
        sub = neg[rng.choice(n_neg, size=n_pos, replace=False)]
        fp = int(np.count_nonzero(sub >= threshold))
        tn = n_pos - fp
        if tp + fp:
            ppv[i] = tp / (tp + fp)
        if tn + fn:
            npv[i] = tn / (tn + fn)
    alpha = (1.0 - level) / 2.0

    def summarize(v):
        v = v[~np.isnan(v)]
        if v.size == 0:
            return float("nan"), (float("nan"), float("nan"))
        lo, hi = np.quantile(v, [alpha, 1.0 - alpha])
        return float(v.mean()), (float(lo), float(hi))

    p, pci = summarize(ppv)
    q, qci = summarize(npv)
    return p, q, pci, qci


# --- Student-t via the regularized incomplete beta ---------------------------

def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    """Modified Lentz evaluation of the incomplete-beta continued fraction."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t with ``df``."""
    if math.isinf(t):
        return 0.0
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return min(1.0, betainc_reg(df / 2.0, 0.5, x))


def welch_t(a, b) -> TestResult:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise MetricError("welch_t needs at least 2 observations per group")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = a.size, b.size
    diff = a.mean() - b.mean()
    se2 = va / na + vb / nb
    if se2 == 0.0:
        if diff == 0.0:
            return TestResult(0.0, float(na + nb - 2), 1.0, note="zero variance, equal means")
        return TestResult(math.copysign(math.inf, diff), float(na + nb - 2), 0.0,
                          note="zero variance, unequal means")
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return TestResult(float(t), float(df), student_t_sf(t, df))


def cohens_d(a, b) -> float:
    """|mean(a) - mean(b)| / sqrt((var(a) + var(b)) / 2), sample variances."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise MetricError("cohens_d needs at least 2 observations per group")
    avg_var = (a.var(ddof=1) + b.var(ddof=1)) / 2.0
    if avg_var == 0.0:
        raise MetricError("zero average variance")
    return float(abs(a.mean() - b.mean()) / math.sqrt(avg_var))


def pearson_r(x, y) -> TestResult:
    """Sample correlation; ``statistic`` and ``effect_size`` both hold r."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise MetricError("pearson_r needs two equal-length samples of size >= 3")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("zero variance")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    n = x.size
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1.0 - r * r))
        p = student_t_sf(t, n - 2)
    return TestResult(r, float(n - 2), p, effect_size=r)


# --- dose and apnea vocabularies ---------------------------------------------

DDD_MG = {
    "escitalopram": 10.0,
    "citalopram": 20.0,
    "fluoxetine": 20.0,
    "sertraline": 50.0,
    "paroxetine": 20.0,
    "mirtazapine": 30.0,
    "bupropion": 300.0,
    "venlafaxine": 150.0,
    "desvenlafaxine": 50.0,
    "imipramine": 100.0,
    "nortriptyline": 75.0,
}


def ddd_normalize(drug: str, dose_mg: float) -> float:
    """Prescribed dose as a fraction of the WHO defined daily dose."""
    key = drug.strip().lower()
    if key not in DDD_MG:
        raise MetricError(f"unknown drug {drug!r}; no defined daily dose")
    if not dose_mg > 0:
        raise MetricError("dose must be positive")
    return dose_mg / DDD_MG[key]


AHI_CLASSES = ("Normal", "Mild", "Moderate", "Severe")


def ahi_class(ahi: float) -> str:
    """Normal < 5 <= Mild < 15 <= Moderate <= 30 < Severe."""
    if ahi < 0:
        raise MetricError("AHI must be nonnegative")
    if ahi < 5:
        return "Normal"
    if ahi < 15:
        return "Mild"
    if ahi <= 30:
        return "Moderate"
    return "Severe"


def _auroc_units(units) -> float:
    s = [u[0] for u in units]
    y = [u[1] for u in units]
    return auroc(s, y)


def evaluate(scores, labels, *, n_boot: int = 1000, seed: int = 0, threshold: Optional[float] = None,
             fixed_specificity: Optional[float] = None) -> EvalReport:
    """AUROC with bootstrap CI, an operating point, and balanced PPV/NPV.

    The operating point is the Youden threshold unless ``threshold`` or
    ``fixed_specificity`` is given.
    """
    s, y, n_pos, n_neg = _split(scores, labels)
    auc = auroc(s, y)
    units = list(zip(s.tolist(), y.tolist()))
    lo, hi = bootstrap_ci(_auroc_units, units, n=n_boot, seed=seed)
    if threshold is not None:
        tp, fn, tn, fp = _confusion(s, y, threshold)
        thr, sens, spec = threshold, tp / n_pos, tn / n_neg
    elif fixed_specificity is not None:
        thr, sens, spec = threshold_at_specificity(s, y, fixed_specificity)
    else:
        thr, sens, spec = youden_threshold(s, y)
    if n_neg >= n_pos:
        ppv, npv, pci, nci = ppv_npv_balanced(s, y, thr, n_boot=n_boot, seed=seed)
    else:
        ppv = npv = float("nan")
        pci = nci = (float("nan"), float("nan"))
    return EvalReport(auc, (lo, hi), float(thr), float(sens), float(spec), ppv, pci, npv, nci,
                      n_pos, n_neg)


# --- subgroup tables ---------------------------------------------------------

GROUP_KEYS = ("drug", "class", "dose", "ahi", "age", "sex", "cotherapy")
DOSE_BINS = ("<=0.5", "0.5-1", "1", ">1")
COTHERAPY_GROUPS = ("monotherapy", "co-therapy", "multi-antidepressant")
CONTROL_CLASS = "None"


@dataclass(frozen=True)
class ScoredUnit:
    """One participant-phase aggregate with the metadata subgroup tables key on.

    ``med_class`` is the fine-grained class name (atypicals resolved by
    drug), ``co_antidepressant`` flags co-medication with another
    antidepressant, and ``dose_ratio`` is prescribed dose / defined daily dose.
    """

    participant_id: str
    phase_id: int
    z: float
    label: bool
    med_class: str = CONTROL_CLASS
    drug: Optional[str] = None
    dose_ratio: Optional[float] = None
    co_meds: tuple = ()
    co_antidepressant: bool = False
    ahi: Optional[float] = None
    age: Optional[float] = None
    sex: Optional[str] = None


@dataclass
class SubgroupRow:
    group: str
    comparison: str  # within | vs_controls | vs_antidepressant | summary
    n: int
    n_pos: int
    n_neg: int
    mean_z: float
    sd_z: float
    auroc: Optional[float] = None
    auroc_ci: Optional[tuple] = None
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    welch: Optional[TestResult] = None
    cohens_d: Optional[float] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auroc_ci"] = list(self.auroc_ci) if self.auroc_ci is not None else None
        return d


@dataclass
class SubgroupTable:
    key: str
    threshold: float
    fixed_specificity: Optional[float]
    n_controls: int
    rows: list
    trend: Optional[TestResult] = None  # dose table: highest vs lowest bin

    def row(self, group: str) -> SubgroupRow:
        for r in self.rows:
            if r.group == group:
                return r
        raise KeyError(group)

    def groups(self) -> list:
        return [r.group for r in self.rows]

    def to_dict(self) -> dict:
        return {"key": self.key, "threshold": self.threshold, "fixed_specificity": self.fixed_specificity,
                "n_controls": self.n_controls, "rows": [r.to_dict() for r in self.rows],
                "trend": self.trend.to_dict() if self.trend else None}

    CSV_COLUMNS = ("key", "group", "comparison", "n", "n_pos", "n_neg", "mean_z", "sd_z", "auroc",
                   "auroc_lo", "auroc_hi", "sensitivity", "specificity", "welch_t", "welch_df", "welch_p",
                   "cohens_d")

    def csv_rows(self) -> list:
        out = []
        for r in self.rows:
            ci = r.auroc_ci or (None, None)
            w = r.welch
            out.append([self.key, r.group, r.comparison, r.n, r.n_pos, r.n_neg, r.mean_z, r.sd_z, r.auroc,
                        ci[0], ci[1], r.sensitivity, r.specificity, w.statistic if w else None,
                        w.df if w else None, w.p_value if w else None, r.cohens_d])
        return out


def dose_bin(ratio: float) -> str:
    if ratio <= 0.5 + 1e-9:
        return "<=0.5"
    if abs(ratio - 1.0) <= 1e-9:
        return "1"
    return "0.5-1" if ratio < 1.0 else ">1"


def age_decade(age: float) -> str:
    lo = int(min(max(age, 20.0), 89.999) // 10 * 10)
    return f"{lo}-{lo + 9}"


def _group_of(u: ScoredUnit, key: str) -> Optional[str]:
    mono_pos = u.label and not u.co_meds
    if key == "drug":
        return u.drug.lower() if mono_pos and u.drug else None
    if key == "class":
        return u.med_class if (mono_pos or not u.label) else None
    if key == "dose":
        return dose_bin(u.dose_ratio) if mono_pos and u.dose_ratio is not None else None
    if key == "ahi":
        return ahi_class(u.ahi) if u.ahi is not None else None
    if key == "age":
        return age_decade(u.age) if u.age is not None else None
    if key == "sex":
        return u.sex
    if key == "cotherapy":
        if not u.label:
            return None
        if not u.co_meds:
            return "monotherapy"
        return "multi-antidepressant" if u.co_antidepressant else "co-therapy"
    raise MetricError(f"unknown grouping key {key!r}; choose from {GROUP_KEYS}")


def _group_order(key: str, groups) -> list:
    fixed = {"dose": DOSE_BINS, "ahi": AHI_CLASSES, "cotherapy": COTHERAPY_GROUPS}.get(key)
    if fixed:
        return [g for g in fixed if g in groups]
    return sorted(groups)


def subgroup_report(units, key: str, *, n_boot: int = 1000, seed: int = 0,
                    fixed_specificity: Optional[float] = None) -> SubgroupTable:
    """Stratified performance table for one grouping key.

    Groups that contain both classes are evaluated within the group. Groups
    of medicated units are compared against the shared unmedicated controls
    (med_class ``"None"``); groups of unmedicated or confounder units are
    compared against the antidepressant monotherapy units with a Welch test
    (antidepressant minus group) and Cohen's d. Drug, class, and dose groups
    are restricted to monotherapy. Sensitivity and specificity use one
    threshold for the whole table: the pooled Youden point, or the lowest
    threshold reaching ``fixed_specificity`` on the pooled units.
    Empty groups are omitted.
    """
    units = list(units)
    if key not in GROUP_KEYS:
        raise MetricError(f"unknown grouping key {key!r}; choose from {GROUP_KEYS}")
    z_all = np.array([u.z for u in units], dtype=float)
    y_all = np.array([u.label for u in units], dtype=bool)
    if fixed_specificity is not None:
        thr = threshold_at_specificity(z_all, y_all, fixed_specificity)[0]
    else:
        thr = youden_threshold(z_all, y_all)[0]
    controls = np.array([u.z for u in units if not u.label and u.med_class == CONTROL_CLASS])
    ad = np.array([u.z for u in units if u.label and not u.co_meds])
    members: dict = {}
    for u in units:
        g = _group_of(u, key)
        if g is not None:
            members.setdefault(g, []).append(u)
    rows = []
    for g in _group_order(key, members):
        us = members[g]
        z = np.array([u.z for u in us])
        y = np.array([u.label for u in us], dtype=bool)
        row = SubgroupRow(g, "summary", len(us), int(y.sum()), int((~y).sum()), float(z.mean()),
                          float(z.std(ddof=1)) if z.size > 1 else 0.0)
        if y.all() and controls.size:
            row.comparison = "vs_controls"
            s = np.r_[z, controls]
            lab = np.r_[np.ones(z.size, bool), np.zeros(controls.size, bool)]
        elif not y.any() and ad.size:
            row.comparison = "vs_antidepressant"
            s = np.r_[ad, z]
            lab = np.r_[np.ones(ad.size, bool), np.zeros(z.size, bool)]
            if ad.size >= 2 and z.size >= 2:
                row.welch = welch_t(ad, z)
                try:
                    row.cohens_d = cohens_d(ad, z)
                except MetricError:
                    pass
        elif y.any() and not y.all():
            row.comparison = "within"
            s, lab = z, y
        else:
            rows.append(row)
            continue
        row.auroc = auroc(s, lab)
        row.auroc_ci = bootstrap_ci(_auroc_units, list(zip(s.tolist(), lab.tolist())), n=n_boot, seed=seed)
        row.sensitivity = float(np.mean(s[lab] >= thr))
        row.specificity = float(np.mean(s[~lab] < thr))
        rows.append(row)
    trend = None
    if key == "dose" and len(rows) >= 2:
        lo = np.array([u.z for u in members[rows[0].group]])
        hi = np.array([u.z for u in members[rows[-1].group]])
        if lo.size >= 2 and hi.size >= 2:
            trend = welch_t(hi, lo)
    return SubgroupTable(key, float(thr), fixed_specificity, int(controls.size), rows, trend)


def subgroup_reports(units, keys=GROUP_KEYS, **kw) -> dict:
    return {k: subgroup_report(units, k, **kw) for k in keys}
