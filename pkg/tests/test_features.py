import numpy as np
import pytest

from somnadhere import dsp, features
from somnadhere.data import N2, N3, REM, W, Hypnogram
from somnadhere.features import FeatureError


class TestSleepFeatures:
    def test_latencies(self):
        s = "W" * 10 + "2" * 40 + "R" * 10
        f = features.sleep_features(Hypnogram.from_string(s), age=40, sex="M")
        assert f.sleep_onset_latency_min == 5.0
        assert f.rem_onset_latency_min == 20.0
        assert f.total_sleep_min == 25.0
        assert f.sleep_efficiency == pytest.approx(50 / 60)

    def test_all_rem(self):
        f = features.sleep_features(Hypnogram.from_string("R" * 20))
        assert f.rem_onset_latency_min == 0.0
        assert f.sleep_efficiency == 1.0

    def test_wake_islands(self):
        s = "WW222W22WW33R2WWW2222WW"
        f = features.sleep_features(Hypnogram.from_string(s))
        # islands: "W", "WW", "WWW" between onset (idx 2) and the last sleep epoch (idx 20)
        assert f.n_awakenings == 3
        assert f.waso_min == 3.0
        assert f.transitions.sum() == len(s) - 1
        assert f.durations_min.sum() == pytest.approx(len(s) / 2)

    def test_transitions_hand_count(self):
        f = features.sleep_features(Hypnogram.from_string("W1122R"))
        t = f.transitions
        assert t[W, 1] == 1 and t[1, 1] == 1 and t[1, N2] == 1 and t[N2, N2] == 1 and t[N2, REM] == 1

    def test_no_rem_absent(self):
        f = features.sleep_features(Hypnogram.from_string("W2233"))
        assert f.rem_onset_latency_min is None
        assert np.isnan(f.vector()[features.SLEEP_COLUMNS.index("rem_latency_min")])

    def test_no_sleep_is_error(self):
        with pytest.raises(FeatureError):
            features.sleep_features(Hypnogram.from_string("WWW"))

    def test_vector_columns(self):
        f = features.sleep_features(Hypnogram.from_string("W12R"), age=33.0, sex="M")
        v = f.vector()
        assert v.shape == (len(features.SLEEP_COLUMNS),)
        assert v[-2] == 33.0 and v[-1] == 1.0


def flat_spec(n, rng=None):
    f = np.arange(0.0, 32.5, 0.5)
    p = np.ones((n, f.size)) if rng is None else rng.uniform(0.8, 1.2, (n, f.size))
    return dsp.Spectrogram(p, f)


class TestBandFeatures:
    def test_length(self):
        hyp = Hypnogram.from_string("W1223R2")
        bf = features.eeg_band_features(flat_spec(len(hyp)), hyp)
        v = bf.vector()
        assert v.shape == (63 + 8,) and len(features.BAND_COLUMNS) == 71

    def test_flat_cycle_ratios_near_one(self):
        rng = np.random.default_rng(0)
        hyp = Hypnogram.from_string("W" * 5 + ("2" * 40 + "3" * 30 + "R" * 20) * 5)
        bf = features.eeg_band_features(flat_spec(len(hyp), rng), hyp)
        np.testing.assert_allclose(bf.cycle1_ratio, 1.0, rtol=0.10)

    def test_delta_dominates_2hz(self):
        rate = 64.0
        t = np.arange(int(20 * 30 * rate)) / rate
        sig = dsp.Signal(np.sin(2 * np.pi * 2.0 * t), rate)
        hyp = Hypnogram(np.full(20, N2, np.int8))
        bf = features.eeg_band_features(dsp.multitaper_spectrogram(sig), hyp)
        assert bf.relative[features.BAND_NAMES.index("Delta")] > 0.6

    def test_absent_stage(self):
        hyp = Hypnogram.from_string("W2222")
        bf = features.eeg_band_features(flat_spec(len(hyp)), hyp)
        assert np.isnan(bf.per_stage[REM]).all() and np.isnan(bf.cycle1_ratio[2]).all()
        v = bf.vector()
        assert v[features.BAND_COLUMNS.index("has_REM")] == 0.0
        assert v[features.BAND_COLUMNS.index("has_N2")] == 1.0

    def test_mismatch(self):
        with pytest.raises(FeatureError):
            features.eeg_band_features(flat_spec(3), Hypnogram.from_string("W2"))

    def test_first_cycle(self):
        m = features.first_cycle_mask(Hypnogram.from_string("WW23RR2R"))
        assert m.tolist() == [False, False, True, True, True, True, False, False]
        no_rem = features.first_cycle_mask(Hypnogram.from_string("W" + "2" * 200))
        assert no_rem.sum() == 180


class TestRespTexture:
    def test_regular_sine(self):
        t = np.arange(0, 600, 0.1)
        sig = dsp.Signal(np.sin(2 * np.pi * t / 4.0), 10.0)
        rate, cv, _ = features.resp_texture(sig)
        assert rate == pytest.approx(15.0, rel=1e-3)
        assert cv < 5e-3

    def test_stage_selection(self):
        t = np.arange(0, 120, 0.1)
        sig = dsp.Signal(np.sin(2 * np.pi * t / 4.0), 10.0)
        hyp = Hypnogram.from_string("2222")
        assert np.isnan(features.resp_texture(sig, hyp, stage=REM)).all()


def test_csv_round_trip(tmp_path):
    keys = [("p1", "n0"), ("p2", "n1")]
    m = np.array([[1.5, np.nan, 3.0], [0.1, 2.0, -1.0]])
    p = features.write_feature_csv(tmp_path / "f.csv", keys, m, ("a", "b", "c"))
    k2, m2, cols = features.read_feature_csv(p)
    assert k2 == keys and cols == ("a", "b", "c")
    np.testing.assert_array_equal(np.isnan(m2), np.isnan(m))
    np.testing.assert_array_equal(np.nan_to_num(m2), np.nan_to_num(m))
