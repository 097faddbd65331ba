import numpy as np
import pytest

from somnadhere import dsp
from somnadhere.dsp import DSPError, FilterSpec, Signal


def sine(f, fs, seconds, amp=1.0, phase=0.0):
    t = np.arange(int(round(seconds * fs))) / fs
    return amp * np.sin(2 * np.pi * f * t + phase)


class TestFilter:
    def test_dc_rejection(self):
        y = dsp.iir_filter(Signal(np.full(6000, 3.0), 10.0), dsp.RESP_HIGHPASS).samples
        assert np.max(np.abs(y[600:-600])) < 1e-3 * 3.0

    def test_breathing_band_preserved(self):
        x = sine(0.3, 10.0, 600)
        y = dsp.iir_filter(Signal(x, 10.0), dsp.RESP_HIGHPASS).samples
        core = slice(1000, -1000)
        rms = np.sqrt(np.mean(y[core] ** 2))
        assert abs(rms / (1 / np.sqrt(2)) - 1) < 0.02

    def test_dc_plus_sine(self):
        s = sine(1.0, 10.0, 300)
        y = dsp.iir_filter(Signal(s + 5.0, 10.0), dsp.RESP_HIGHPASS).samples
        assert np.corrcoef(y, s)[0, 1] > 0.999

    def test_bandpass_removes_out_of_band(self):
        x = sine(10.0, 256.0, 120) + sine(0.05, 256.0, 120) + sine(60.0, 256.0, 120)
        y = dsp.iir_filter(Signal(x, 256.0), dsp.EEG_BANDPASS).samples
        assert np.corrcoef(y[2560:-2560], sine(10.0, 256.0, 120)[2560:-2560])[0, 1] > 0.99

    def test_eeg_filter_at_64hz_drops_upper_edge(self):
        assert dsp.eeg_filter_for(64.0) == FilterSpec("highpass", (0.3,), 4)
        assert dsp.eeg_filter_for(256.0) == dsp.EEG_BANDPASS

    def test_zero_phase(self):
        s = sine(0.25, 10.0, 400)
        y = dsp.iir_filter(Signal(s, 10.0), dsp.RESP_HIGHPASS).samples
        lags = np.arange(-5, 6)
        core = slice(500, -500)
        xc = [np.dot(np.roll(y, k)[core], s[core]) for k in lags]
        assert lags[int(np.argmax(xc))] == 0

    @pytest.mark.parametrize("spec", [
        FilterSpec("highpass", (5.0,), 4),
        FilterSpec("bandpass", (0.3, 40.0), 4),
        FilterSpec("bandpass", (2.0, 1.0), 4),
        FilterSpec("highpass", (0.1,), 0),
        FilterSpec("lowpass", (0.1,), 2),
    ])
    def test_invalid_spec(self, spec):
        with pytest.raises(DSPError):
            dsp.iir_filter(Signal(np.zeros(100), 10.0), spec)

    def test_non_finite(self):
        x = np.zeros(100)
        x[5] = np.nan
        with pytest.raises(DSPError):
            dsp.iir_filter(Signal(x, 10.0), dsp.RESP_HIGHPASS)


class TestResample:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=500)
        y = dsp.resample(Signal(x, 10.0), 10.0)
        assert np.array_equal(y.samples, x) and y.rate_hz == 10.0

    @pytest.mark.parametrize("src,dst", [(100.0, 10.0), (25.0, 10.0), (10.0, 64.0), (256.0, 64.0)])
    def test_constant(self, src, dst):
        y = dsp.resample(Signal(np.full(2000, 2.5), src), dst)
        np.testing.assert_allclose(y.samples, 2.5, rtol=1e-9)

    def test_downsample_sine(self):
        y = dsp.resample(Signal(sine(2.0, 100.0, 60), 100.0), 10.0)
        ref = sine(2.0, 10.0, 60)
        assert y.rate_hz == 10.0
        assert np.corrcoef(y.samples[20:-20], ref[20:-20])[0, 1] > 0.999

    def test_duration_preserved(self):
        y = dsp.resample(Signal(np.zeros(12345), 256.0), 64.0)
        assert abs(len(y) / 64.0 - 12345 / 256.0) <= 1 / 64.0

    def test_anti_alias(self):
        # 30 Hz tone above the 5 Hz output Nyquist must not alias into the band
        y = dsp.resample(Signal(sine(30.0, 100.0, 60), 100.0), 10.0)
        assert np.std(y.samples[20:-20]) < 0.02

    def test_bad_rate(self):
        with pytest.raises(DSPError):
            dsp.resample(Signal(np.zeros(10), 10.0), 0)


def test_linearity():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=3000), rng.normal(size=3000)
    a, b = 1.7, -0.4
    for op in (lambda s: dsp.iir_filter(Signal(s, 10.0), dsp.RESP_HIGHPASS).samples,
               lambda s: dsp.resample(Signal(s, 100.0), 64.0).samples):
        lhs = op(a * x + b * y)
        rhs = a * op(x) + b * op(y)
        assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(rhs))


class TestNormalize:
    def test_constant(self):
        assert np.all(dsp.normalize(Signal(np.full(50, 4.0), 10.0)).samples == 0)

    def test_gaussian_unit_scale(self):
        x = np.random.default_rng(1).normal(3.0, 2.0, size=100_000)
        y = dsp.normalize(Signal(x, 10.0)).samples
        assert 0.95 <= y.std() <= 1.05
        assert abs(np.median(y)) < 1e-12

    def test_outlier_clipped(self):
        x = np.random.default_rng(2).normal(size=10_000)
        ref = dsp.normalize(Signal(x, 10.0)).samples
        x2 = x.copy()
        x2[123] = 1e6
        y = dsp.normalize(Signal(x2, 10.0)).samples
        assert y[123] == 5.0
        bulk = np.abs(ref) < 4
        bulk[123] = False
        assert np.max(np.abs(y[bulk] - ref[bulk])) <= 0.01 * np.max(np.abs(ref[bulk]))

    def test_empty(self):
        with pytest.raises(DSPError):
            dsp.normalize(Signal(np.zeros(0), 10.0))


class TestMultitaper:
    def test_tone_localization(self):
        spec = dsp.multitaper_spectrogram(Signal(sine(4.0, 64.0, 300), 64.0))
        df = spec.freqs_hz[1] - spec.freqs_hz[0]
        peaks = spec.freqs_hz[np.argmax(spec.power, axis=1)]
        assert np.all(np.abs(peaks - 4.0) <= df)

    def test_window_count(self):
        spec = dsp.multitaper_spectrogram(Signal(np.random.default_rng(0).normal(size=3600 * 64), 64.0))
        assert spec.n_windows == 120
        assert spec.freqs_hz.max() <= 32.0
        assert np.all(spec.power >= 0)

    def test_window_formula_with_overlap(self):
        n = 64 * 100 + 17
        spec = dsp.multitaper_spectrogram(Signal(np.ones(n), 64.0), window_s=30, step_s=10)
        assert spec.n_windows == (n - 30 * 64) // (10 * 64) + 1

    def test_white_noise_flat(self):
        x = np.random.default_rng(5).normal(size=100 * 30 * 64)
        spec = dsp.multitaper_spectrogram(Signal(x, 64.0))
        mean_psd = spec.power.mean(axis=0)
        edges = [(0, 1), (1, 4), (4, 8), (8, 12), (12, 16), (16, 32)]
        bands = [mean_psd[(spec.freqs_hz >= lo) & (spec.freqs_hz < hi)].mean() for lo, hi in edges]
        assert max(bands) / min(bands) < 2

    def test_parseval(self):
        # one-sided PSD integrates to the per-window variance
        ratios = []
        for seed in range(3):
            x = np.random.default_rng(seed).normal(0, 2.0, size=40 * 30 * 64)
            spec = dsp.multitaper_spectrogram(Signal(x, 64.0))
            df = spec.freqs_hz[1] - spec.freqs_hz[0]
            ratios.append(spec.power.sum(axis=1).mean() * df / x.var())
        assert all(abs(r - 1) < 0.1 for r in ratios)
        assert np.ptp(ratios) < 0.02

    def test_quadratic_in_amplitude(self):
        x = np.random.default_rng(6).normal(size=5 * 30 * 64)
        s1 = dsp.multitaper_spectrogram(Signal(x, 64.0)).power
        s2 = dsp.multitaper_spectrogram(dsp.rescale_amplitude(Signal(x, 64.0), 2.0)).power
        np.testing.assert_allclose(s2, 4 * s1, rtol=1e-12)

    def test_delay_invariance(self):
        x = np.random.default_rng(7).normal(size=10 * 30 * 64)
        step = 30 * 64
        a = dsp.multitaper_spectrogram(Signal(x, 64.0)).power
        b = dsp.multitaper_spectrogram(Signal(np.r_[np.zeros(2 * step), x], 64.0)).power
        np.testing.assert_allclose(b[2:], a, rtol=1e-10, atol=1e-14)

    def test_too_short(self):
        with pytest.raises(DSPError):
            dsp.multitaper_spectrogram(Signal(np.zeros(64 * 29), 64.0))

    def test_rate_too_low(self):
        with pytest.raises(DSPError):
            dsp.multitaper_spectrogram(Signal(np.zeros(10 * 600), 10.0))

    def test_bin_spectrogram(self):
        spec = dsp.multitaper_spectrogram(Signal(sine(4.5, 64.0, 60), 64.0))
        binned = dsp.bin_spectrogram(spec, np.arange(33))
        assert binned.power.shape == (2, 32)
        assert np.all(np.argmax(binned.power, axis=1) == 4)
        np.testing.assert_allclose(binned.freqs_hz, np.arange(32) + 0.5)


class TestRescale:
    def test_identity(self):
        x = np.arange(5.0)
        assert np.array_equal(dsp.rescale_amplitude(Signal(x, 1.0), 1.0).samples, x)

    def test_chained(self):
        x = np.random.default_rng(0).normal(size=100)
        a, b = 1.3, 0.7
        two = dsp.rescale_amplitude(dsp.rescale_amplitude(Signal(x, 1.0), a), b).samples
        one = dsp.rescale_amplitude(Signal(x, 1.0), a * b).samples
        assert np.max(np.abs(two - one)) <= 1e-12

    @pytest.mark.parametrize("f", [0, -1.0])
    def test_bad_factor(self, f):
        with pytest.raises(DSPError):
            dsp.rescale_amplitude(Signal(np.ones(3), 1.0), f)
