import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from somnadhere import stats
from somnadhere.stats import MetricError


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def t_tail_quadrature(t, df):
    """Two-sided tail from direct integration of the Student-t density."""
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)

    def pdf(x):
        return math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))

    val, _ = integrate.quad(pdf, abs(t), np.inf, epsabs=1e-14, epsrel=1e-12, limit=500)
    return 2 * val


class TestAuroc:
    def test_perfect(self):
        assert stats.auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_tie(self):
        assert stats.auroc([0.5, 0.5], [1, 0]) == 0.5

    def test_worked_example(self):
        # pairs (0.2,0.7) (0.2,0.4) (0.9,0.7) (0.9,0.4): 2 of 4 concordant
        assert stats.auroc([0.2, 0.7, 0.4, 0.9], [1, 0, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(MetricError):
            stats.auroc([0.1, 0.2], [1, 1])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(2, 120))
            s = np.round(rng.random(n), 1)  # coarse grid forces ties
            y = rng.random(n) < 0.4
            y[0], y[1] = True, False
            assert abs(stats.auroc(s, y) - brute_auroc(s, y)) <= 1e-12

    @given(st.lists(st.integers(-50, 50), min_size=4, max_size=40), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_monotone_transform(self, s, seed):
        rng = np.random.default_rng(seed)
        y = rng.random(len(s)) < 0.5
        y[0], y[1] = True, False
        s = np.array(s) / 10.0
        assert stats.auroc(np.exp(s) * 3 + 1, y) == pytest.approx(stats.auroc(s, y), abs=1e-12)


class TestYouden:
    def test_perfect(self):
        thr, sens, spec = stats.youden_threshold([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert (thr, sens, spec) == (0.8, 1.0, 1.0)

    def test_degenerate(self):
        thr, sens, spec = stats.youden_threshold([0.3] * 4, [1, 0, 1, 0])
        assert thr == 0.3
        assert sens + spec - 1 == 0

    def test_worked_example(self):
        # candidates 0.1, 0.35, 0.4, 0.8 give J = 0, 0.5, 1, 0.5
        assert stats.youden_threshold([0.1, 0.4, 0.35, 0.8], [0, 1, 0, 1]) == (0.4, 1.0, 1.0)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(4, 60))
            s = np.round(rng.random(n), 2)
            y = rng.random(n) < 0.5
            y[0], y[1] = True, False
            thr, sens, spec = stats.youden_threshold(s, y)
            best = max(
                ((s[y] >= c).mean() + (s[~y] < c).mean() - 1, -c) for c in np.unique(s)
            )
            assert thr == -best[1]
            # independent recomputation from the confusion matrix
            assert sens == (s[y] >= thr).mean()
            assert spec == (s[~y] < thr).mean()


class TestBootstrap:
    def test_zero_variance(self):
        units = [(1.0, 1)] * 10 + [(0.0, 0)] * 10
        lo, hi = stats.bootstrap_ci(stats._auroc_units, units, n=200, seed=1)
        assert lo == hi == 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        units = [(float(rng.random()), int(rng.random() < 0.5)) for _ in range(40)]
        a = stats.bootstrap_ci(stats._auroc_units, units, n=100, seed=5)
        b = stats.bootstrap_ci(stats._auroc_units, units, n=100, seed=5)
        assert a == b

    def test_point_estimate_inside(self):
        rng = np.random.default_rng(11)
        for k in range(100):
            n = 60
            y = rng.random(n) < 0.5
            y[0], y[1] = True, False
            s = rng.normal(size=n) + y * rng.uniform(0, 2)
            units = list(zip(s.tolist(), y.tolist()))
            lo, hi = stats.bootstrap_ci(stats._auroc_units, units, n=300, seed=k)
            assert lo <= stats.auroc(s, y) <= hi

    def test_redraw_exhaustion(self):
        def always_fails(_):
            raise MetricError("nope")
        with pytest.raises(MetricError):
            stats.bootstrap_ci(always_fails, [1, 2, 3], n=2, max_redraws=3)

    def test_width_shrinks_with_n(self):
        rng = np.random.default_rng(2)

        def width(n, seed):
            y = np.arange(n) % 2 == 0
            s = rng.normal(size=n) + y
            lo, hi = stats.bootstrap_ci(stats._auroc_units, list(zip(s, y)), n=200, seed=seed)
            return hi - lo

        w100 = np.median([width(100, i) for i in range(50)])
        w400 = np.median([width(400, i) for i in range(50)])
        assert w400 < w100


class TestPpvNpv:
    def test_perfect(self):
        s = [0.9, 0.8, 0.2, 0.1, 0.15, 0.05]
        y = [1, 1, 0, 0, 0, 0]
        ppv, npv, pci, nci = stats.ppv_npv_balanced(s, y, 0.5, n_boot=50)
        assert ppv == npv == 1.0 and pci == (1.0, 1.0) and nci == (1.0, 1.0)

    def test_all_positive(self):
        s = [0.9, 0.8, 0.7, 0.6, 0.65]
        ppv, npv, _, _ = stats.ppv_npv_balanced(s, [1, 1, 0, 0, 0], 0.0, n_boot=50)
        assert ppv == 0.5
        assert math.isnan(npv)

    def test_single_iteration_oracle(self):
        s = np.array([0.9, 0.6, 0.3, 0.7, 0.2, 0.4, 0.1, 0.8])
        y = np.array([1, 1, 1, 0, 0, 0, 0, 0], dtype=bool)
        ppv, npv, _, _ = stats.ppv_npv_balanced(s, y, 0.5, n_boot=1, seed=4)
        sub = s[~y][np.random.default_rng([4, 0]).choice(5, size=3, replace=False)]
        tp, fn = 2, 1
        fp = int((sub >= 0.5).sum())
        tn = 3 - fp
        assert ppv == tp / (tp + fp)
        assert npv == tn / (tn + fn)

    def test_too_few_negatives(self):
        with pytest.raises(MetricError):
            stats.ppv_npv_balanced([0.1, 0.2, 0.3], [1, 1, 0], 0.5)


class TestWelch:
    def test_identical(self):
        r = stats.welch_t([1, 2, 3], [1, 2, 3])
        assert r.statistic == 0.0 and r.p_value == 1.0

    def test_worked_example(self):
        r = stats.welch_t([10, 11, 12], [0, 1, 2])
        assert abs(r.statistic - 10 / math.sqrt(2 / 3)) < 1e-10
        assert abs(r.df - 4.0) < 1e-10
        assert abs(r.p_value - t_tail_quadrature(r.statistic, 4.0)) < 1e-6

    def test_degenerate(self):
        assert stats.welch_t([1, 1], [1, 1]).p_value == 1.0
        r = stats.welch_t([1, 1], [2, 2])
        assert r.p_value == 0.0 and "unequal" in r.note

    @pytest.mark.parametrize("t,df", [(0.3, 2.5), (1.7, 9.0), (2.2, 31.4), (4.5, 3.0), (-1.1, 120.0)])
    def test_p_matches_quadrature(self, t, df):
        assert abs(stats.student_t_sf(t, df) - t_tail_quadrature(t, df)) < 1e-6

    def test_matches_scipy_on_random_data(self):
        from scipy.stats import ttest_ind
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.normal(size=int(rng.integers(3, 30)))
            b = rng.normal(0.5, 2.0, size=int(rng.integers(3, 30)))
            ours = stats.welch_t(a, b)
            ref = ttest_ind(a, b, equal_var=False)
            assert ours.statistic == pytest.approx(ref.statistic, rel=1e-10)
            assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-14)


class TestCohensD:
    def test_identical(self):
        assert stats.cohens_d([1, 2, 3], [1, 2, 3]) == 0.0

    def test_worked_example(self):
        assert abs(stats.cohens_d([0, 2], [-1, 1]) - 1 / math.sqrt(2)) < 1e-10

    def test_translation_and_scale(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=20), rng.normal(1, size=15)
        d = stats.cohens_d(a, b)
        assert abs(stats.cohens_d(a + 7.5, b + 7.5) - d) < 1e-12
        assert abs(stats.cohens_d(a * 3.2, b * 3.2) - d) < 1e-12

    def test_zero_variance(self):
        with pytest.raises(MetricError):
            stats.cohens_d([1, 1], [2, 2])


class TestPearson:
    def test_identity_and_affine(self):
        x = np.arange(10.0)
        assert stats.pearson_r(x, x).effect_size == 1.0
        assert stats.pearson_r(x, -2 * x + 3).effect_size == -1.0

    def test_fixed_table(self):
        x = np.array([1.0, 2.5, 3.1, 4.8, 5.0, 6.2, 7.7, 8.1, 9.4, 10.0])
        y = np.array([2.1, 2.0, 3.9, 4.2, 6.1, 5.8, 7.0, 9.5, 8.8, 11.2])
        mx, my = x.mean(), y.mean()
        cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
        r_ref = cov / math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))
        res = stats.pearson_r(x, y)
        assert abs(res.effect_size - r_ref) < 1e-12
        t = r_ref * math.sqrt(8 / (1 - r_ref ** 2))
        assert abs(res.p_value - t_tail_quadrature(t, 8)) < 1e-6

    def test_tiny_p_values_representable(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=5000)
        y = 0.45 * x + rng.normal(size=5000)
        p = stats.pearson_r(x, y).p_value
        assert 0.0 < p < 1e-150

    def test_zero_variance(self):
        with pytest.raises(MetricError, match="zero variance"):
            stats.pearson_r([1, 1, 1], [1, 2, 3])


class TestVocabularies:
    @pytest.mark.parametrize("drug,dose,ratio", [
        ("fluoxetine", 40, 2.0), ("Venlafaxine", 75, 0.5), ("sertraline", 50, 1.0),
        ("bupropion", 150, 0.5), ("nortriptyline", 75, 1.0),
    ])
    def test_ddd(self, drug, dose, ratio):
        assert stats.ddd_normalize(drug, dose) == ratio

    def test_ddd_errors(self):
        with pytest.raises(MetricError):
            stats.ddd_normalize("aspirin", 100)
        with pytest.raises(MetricError):
            stats.ddd_normalize("fluoxetine", 0)

    def test_table_has_eleven_entries(self):
        assert len(stats.DDD_MG) == 11

    @pytest.mark.parametrize("ahi,cls", [
        (0, "Normal"), (3, "Normal"), (4.99, "Normal"), (5, "Mild"), (7, "Mild"), (14.9, "Mild"),
        (15, "Moderate"), (30, "Moderate"), (30.01, "Severe"), (31, "Severe"),
    ])
    def test_ahi(self, ahi, cls):
        assert stats.ahi_class(ahi) == cls

    def test_ahi_negative(self):
        with pytest.raises(MetricError):
            stats.ahi_class(-1)


def test_evaluate_perfect():
    rep = stats.evaluate([0.9, 0.8, 0.7, 0.2, 0.1, 0.15], [1, 1, 1, 0, 0, 0], n_boot=100)
    assert rep.auroc == 1.0 and rep.auroc_ci == (1.0, 1.0)
    assert rep.sensitivity == rep.specificity == 1.0
    assert rep.ppv == rep.npv == 1.0


def test_roc_curve_corners():
    fpr, tpr, _ = stats.roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert (fpr[0], tpr[0]) == (0.0, 0.0)
    assert (0.0, 1.0) in set(zip(fpr, tpr))
    assert (fpr[-1], tpr[-1]) == (1.0, 1.0)


# --- subgroup tables ---------------------------------------------------------

def _units(seed=0, n=300):
    from somnadhere.stats import ScoredUnit
    rng = np.random.default_rng(seed)
    out = []
    classes = ["SSRI", "SNRI", "TCA", "Benzodiazepine", "Hypnotic"]
    for i in range(n):
        pos = i % 3 == 0
        cls = classes[i % 3] if pos else (["None"] * 6 + classes[3:])[i % 8]
        dose = [0.5, 1.0, 2.0][i % 9 // 3] if pos else None
        z = float(np.clip(0.3 + (0.2 * np.sqrt(dose) if pos else 0.0) + rng.normal(0, 0.1), 0, 1))
        co = ("Benzodiazepine",) if pos and i % 15 == 0 else ()
        out.append(ScoredUnit(f"p{i:04d}", 0, z, pos, cls, "sertraline" if pos else None, dose, co, False,
                              float(rng.uniform(0, 50)), float(rng.uniform(20, 90)), "FM"[i % 2]))
    return out


def test_subgroup_sex_partition():
    from somnadhere.stats import subgroup_report
    units = _units()
    t = subgroup_report(units, "sex", n_boot=50)
    assert t.groups() == ["F", "M"]
    assert sum(r.n for r in t.rows) == len(units)
    assert all(r.comparison == "within" and 0 <= r.auroc <= 1 for r in t.rows)


def test_subgroup_dose_increasing_and_monotherapy_only():
    from somnadhere.stats import subgroup_report
    units = _units()
    t = subgroup_report(units, "dose", n_boot=50)
    assert t.groups() == ["<=0.5", "1", ">1"]
    means = [r.mean_z for r in t.rows]
    assert means[0] < means[1] < means[2]
    assert t.trend.statistic > 0 and t.trend.p_value < 0.05
    assert sum(r.n for r in t.rows) == sum(u.label and not u.co_meds for u in units)


def test_subgroup_class_confounders_vs_antidepressants():
    from somnadhere.stats import subgroup_report
    t = subgroup_report(_units(), "class", n_boot=50)
    for g in ("Benzodiazepine", "Hypnotic", "None"):
        r = t.row(g)
        assert r.comparison == "vs_antidepressant"
        assert r.welch.statistic > 0 and r.welch.p_value < 0.05
    assert t.row("SSRI").comparison == "vs_controls" and t.row("SSRI").auroc > 0.7


def test_subgroup_fixed_specificity_and_serialization(tmp_path):
    import json
    from somnadhere.stats import GROUP_KEYS, subgroup_reports
    tables = subgroup_reports(_units(), n_boot=20, fixed_specificity=0.83)
    assert set(tables) == set(GROUP_KEYS)
    t = tables["class"]
    assert t.fixed_specificity == 0.83
    assert t.row("SSRI").specificity >= 0.83 - 1e-12
    json.dumps({k: v.to_dict() for k, v in tables.items()})
    assert len(t.csv_rows()[0]) == len(t.CSV_COLUMNS)
    cot = tables["cotherapy"]
    assert set(cot.groups()) <= {"monotherapy", "co-therapy", "multi-antidepressant"}


def test_subgroup_unknown_key():
    from somnadhere.stats import subgroup_report
    with pytest.raises(MetricError):
        subgroup_report(_units(), "height")
