import numpy as np
import pytest

from somnadhere import interpret, nn
from somnadhere.data import N2, N3, REM, W, Hypnogram
from somnadhere.dsp import Spectrogram
from somnadhere.interpret import InterpretError
from somnadhere.stats import MetricError

FREQS = interpret.RECON_FREQS


def _nights(rng, n, so=1.0, beta=1.0):
    base = 10.0 / (1.0 + FREQS)
    gain = np.ones_like(FREQS)
    gain[FREQS < 1] = so
    gain[FREQS >= 16] = beta
    return [base * gain * rng.uniform(0.8, 1.2, size=(40, FREQS.size)) for _ in range(n)]


# --- spectra ---------------------------------------------------------------------

def test_identical_cohorts_null():
    rng = np.random.default_rng(0)
    spectra = _nights(rng, 60)
    sd = interpret.spectra_cohort_diff(spectra, [i % 2 == 0 for i in range(60)], n_boot=200)
    assert sd.raw_max_abs < 0.05 * sd.mean_a.max()
    assert np.abs(sd.diff).max() == pytest.approx(1.0)


def test_exactly_identical_cohorts_give_zero():
    s = [np.ones((5, FREQS.size))] * 20
    sd = interpret.spectra_cohort_diff(s, [True] * 10 + [False] * 10, n_boot=50)
    assert sd.raw_max_abs == 0 and not sd.diff.any()


def test_planted_so_beta_difference():
    rng = np.random.default_rng(1)
    spectra = _nights(rng, 30, so=1.5, beta=1.5) + _nights(rng, 30)
    labels = [True] * 30 + [False] * 30
    sd = interpret.spectra_cohort_diff(spectra, labels, n_boot=200)
    assert np.abs(sd.diff).max() == 1.0
    assert (sd.diff[FREQS < 1] > 0).all() and (sd.diff[FREQS >= 16] > 0).all()
    for band in ("SO", "Beta"):
        assert sd.band_tests[band].statistic > 0 and sd.band_tests[band].p_value < 0.01
    assert (sd.ci_a[0] <= sd.mean_a).all() and (sd.mean_a <= sd.ci_a[1]).all()


def test_spectra_diff_antisymmetric():
    rng = np.random.default_rng(2)
    spectra = _nights(rng, 24, so=1.3) + _nights(rng, 24)
    lab = np.array([True] * 24 + [False] * 24)
    a = interpret.spectra_cohort_diff(spectra, lab, n_boot=20)
    b = interpret.spectra_cohort_diff(spectra, ~lab, n_boot=20)
    np.testing.assert_allclose(a.diff, -b.diff, atol=1e-15)


def test_spectra_needs_cohort_size():
    rng = np.random.default_rng(3)
    with pytest.raises(InterpretError, match="at least 10"):
        interpret.spectra_cohort_diff(_nights(rng, 15), [True] * 5 + [False] * 10)


def test_reconstruct_night_shape():
    mc = nn.preset("tiny").with_(patch_samples=600, spec_bins=64, max_tokens=20)
    w = nn.init_weights(mc, 0)
    w["aux.tok_mean"] = np.zeros(mc.token_dim, np.float32)
    w["aux.tok_std"] = np.ones(mc.token_dim, np.float32)
    w["aux.spec_mean"] = np.zeros(64, np.float32)
    w["aux.spec_std"] = np.ones(64, np.float32)
    x = np.random.default_rng(0).standard_normal((7, mc.token_dim)).astype(np.float32)
    out = interpret.reconstruct_night(x, w, mc)
    assert out.shape == (14, 32) and (out > 0).all()


# --- REM latency -------------------------------------------------------------------

def test_score_rem_monotone_and_shuffled():
    rng = np.random.default_rng(4)
    lat = rng.uniform(30, 200, 300)
    assert interpret.score_rem_correlation(np.sqrt(lat), lat).statistic > 0.99
    ps, rs = [], []
    for i in range(20):
        r = interpret.score_rem_correlation(rng.permutation(np.log(lat)), lat)
        ps.append(r.p_value)
        rs.append(abs(r.statistic))
    assert np.median(ps) > 0.05 and np.median(rs) < 0.1


def test_score_rem_needs_pairs():
    with pytest.raises(MetricError):
        interpret.score_rem_correlation([0.1, 0.2, np.nan], [10, 20, 30])


def _night(rng, lat_min, so, beta, n_ep=600):
    """Hypnogram with 10 min wake, NREM until REM at ``lat_min``, then alternating N2/REM."""
    ep = np.full(n_ep, N2, dtype=np.int8)
    ep[:20] = W
    onset = 20
    rem = onset + int(lat_min * 2)
    ep[onset + 40:onset + 80] = N3
    ep[rem:rem + 20] = REM
    ep[rem + 60:rem + 80] = REM
    f = np.arange(0.0, 32.5, 0.5)
    p = 1.0 / (1.0 + f) * rng.uniform(0.9, 1.1, size=(n_ep, f.size))
    p[:, f < 1] *= so
    p[:, f >= 16] *= beta
    return Spectrogram(p, f, 30.0), Hypnogram(ep)


def test_early_sleep_coupling_and_null():
    rng = np.random.default_rng(5)
    specs, hyps = [], []
    for _ in range(120):
        k = rng.uniform(0.8, 1.6)
        s, h = _night(rng, 70 + 60 * (k - 0.8) + rng.normal(0, 5), so=k, beta=k)
        specs.append(s)
        hyps.append(h)
    res = interpret.early_sleep_power_vs_rem(specs, hyps)
    assert res.so_beta.statistic > 0.5 and res.so_beta.p_value < 1e-6
    assert res.n_used == 120 and res.n_skipped == 0
    specs, hyps = [], []
    for _ in range(500):
        s, h = _night(rng, rng.uniform(70, 120), so=rng.uniform(0.8, 1.6), beta=1.0)
        specs.append(s)
        hyps.append(h)
    assert abs(interpret.early_sleep_power_vs_rem(specs, hyps).so.statistic) < 0.1


def test_early_sleep_skips_short_nights():
    rng = np.random.default_rng(6)
    s, h = _night(rng, 30, 1, 1)
    assert interpret.early_sleep_power(s, h) is None
    with pytest.raises(InterpretError, match="no nights"):
        interpret.early_sleep_power_vs_rem([s], [h])


def test_early_sleep_constant_power_errors():
    rng = np.random.default_rng(7)
    nights = [_night(rng, 70 + i, 1, 1) for i in range(5)]
    specs = [Spectrogram(np.ones_like(s.power), s.freqs_hz, 30.0) for s, _ in nights]
    with pytest.raises(MetricError, match="zero variance"):
        interpret.early_sleep_power_vs_rem(specs, [h for _, h in nights])


# --- projection -----------------------------------------------------------------------

def test_projection_line_and_duplicates():
    t = np.linspace(-1, 1, 20)[:, None]
    X = t * np.array([[1.0, 2.0, -1.0]]) + 3.0
    p = interpret.latent_projection(X)
    assert p.explained[0] == pytest.approx(1.0) and p.explained[1] < 1e-12
    X2 = np.random.default_rng(0).standard_normal((10, 5))
    X2 = np.vstack([X2, X2[:2]])
    p2 = interpret.latent_projection(X2)
    np.testing.assert_allclose(p2.coords[-2:], p2.coords[:2], atol=1e-12)
    assert p2.explained[0] >= p2.explained[1]


def test_projection_rotation_invariant():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((50, 6)) * np.array([5, 3, 1, 0.5, 0.2, 0.1])
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    a = interpret.latent_projection(X).coords
    b = interpret.latent_projection(X @ Q).coords
    np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-9)


def test_projection_degenerate():
    with pytest.raises(InterpretError, match="degenerate"):
        interpret.latent_projection(np.ones((5, 4)))
    with pytest.raises(InterpretError):
        interpret.latent_projection(np.ones((2, 4)))


# --- longitudinal ---------------------------------------------------------------------

def test_smooth_constant_single_and_bounds():
    tr = interpret.longitudinal_smooth(np.arange(30), np.full(30, 0.3))
    np.testing.assert_allclose(tr.smoothed, 0.3)
    one = interpret.longitudinal_smooth([5], [0.7])
    assert one.smoothed[0] == 0.7
    rng = np.random.default_rng(9)
    z = rng.uniform(0.1, 0.9, 50)
    d = np.sort(rng.choice(100, 50, replace=False))
    tr = interpret.longitudinal_smooth(d, z)
    assert z.min() <= tr.smoothed.min() and tr.smoothed.max() <= z.max()
    assert np.all(np.diff(tr.date_index) > 0)


def test_smooth_step_crossing():
    k = 30
    d = np.arange(60)
    z = np.where(d < k, 0.2, 0.8)
    tr = interpret.longitudinal_smooth(d, z, window_nights=14)
    c = tr.first_crossing(0.5)
    assert c is not None and abs(c - k) <= 7


def test_smooth_tolerates_gaps_and_rejects_duplicates():
    tr = interpret.longitudinal_smooth([0, 1, 2, 20, 21], [0.1, 0.1, 0.1, 0.9, 0.9])
    assert tr.smoothed[2] == pytest.approx(0.1) and tr.smoothed[3] == pytest.approx(0.9)
    with pytest.raises(InterpretError, match="duplicate"):
        interpret.longitudinal_smooth([1, 1], [0.1, 0.2])


def test_csv_exports(tmp_path):
    rng = np.random.default_rng(10)
    sd = interpret.spectra_cohort_diff(_nights(rng, 20) + _nights(rng, 20), [True] * 20 + [False] * 20, n_boot=20)
    lines = interpret.write_spectra_csv(tmp_path / "s.csv", sd).read_text().splitlines()
    assert len(lines) == 33 and lines[0].startswith("freq_hz,diff")
    tr = interpret.longitudinal_smooth(np.arange(5), np.linspace(0, 1, 5))
    lines = interpret.write_trajectory_csv(tmp_path / "t.csv", tr, "L0000").read_text().splitlines()
    assert lines[0] == "participant_id,date_index,z,smoothed_z,window_nights" and len(lines) == 6
