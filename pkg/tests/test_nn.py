import math

import numpy as np
import pytest

from somnadhere import nn
from somnadhere.dsp import Signal
from somnadhere.nn import gradcheck, ops
from somnadhere.nn.model import NNError

TINY = nn.preset("tiny")


def tiny_weights(seed=0, dtype=np.float32):
    return nn.init_weights(TINY, seed, dtype)


class TestPatchify:
    def test_eight_hours(self):
        cfg = nn.ModelConfig(max_tokens=2000)
        sig = Signal(np.zeros(8 * 3600 * 10, np.float32), 10.0)
        assert nn.patchify(sig, cfg).shape == (960, 300)

    def test_too_short(self):
        with pytest.raises(nn.TokenError):
            nn.patchify(Signal(np.zeros(299), 10.0), nn.ModelConfig())

    def test_partial_dropped(self):
        x = np.arange(650, dtype=np.float32)
        tok = nn.patchify(Signal(x, 10.0), nn.ModelConfig())
        assert tok.shape == (2, 300) and tok[1, -1] == 599

    def test_truncated_to_max_tokens(self):
        cfg = nn.ModelConfig(max_tokens=3)
        assert nn.patchify(Signal(np.zeros(3000), 10.0), cfg).shape == (3, 300)

    def test_wrong_rate(self):
        with pytest.raises(nn.TokenError):
            nn.patchify(Signal(np.zeros(3000), 25.0), nn.ModelConfig())


class TestTokenFeatures:
    def test_raw_passthrough(self):
        tok = np.random.default_rng(0).normal(size=(4, 300)).astype(np.float32)
        assert np.array_equal(nn.token_features(tok, nn.ModelConfig()), tok)

    def test_logspec_peak_at_breathing_rate(self):
        cfg = nn.preset("desk")
        t = np.arange(cfg.patch_samples) / cfg.resp_hz
        tok = np.sin(2 * np.pi * 0.25 * t)[None]
        f = nn.token_features(tok, cfg)
        assert f.shape == (1, cfg.logspec_bins) and f.dtype == np.float32
        centre = 0.25 / cfg.logspec_fmax_hz * cfg.logspec_bins
        assert abs(int(np.argmax(f[0])) - centre) <= 1


class TestEncoder:
    def test_shape_finite(self):
        x = np.random.default_rng(0).normal(size=(4, TINY.token_dim))
        lat = nn.encoder_forward(x, tiny_weights(), TINY)
        assert lat.shape == (4, 16) and np.isfinite(lat).all()

    def test_padding_isolated(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 8, TINY.token_dim)).astype(np.float32)
        mask = np.ones((2, 8), bool)
        mask[:, 5:] = False
        w = tiny_weights(1)
        a = nn.encoder_forward(x, w, TINY, mask)
        y = x.copy()
        y[:, 5:] = rng.normal(size=(2, 3, TINY.token_dim)) * 100
        b = nn.encoder_forward(y, w, TINY, mask)
        assert np.array_equal(a[:, :5], b[:, :5])

    def test_positions_break_symmetry(self):
        x = np.tile(np.random.default_rng(2).normal(size=TINY.token_dim), (3, 1))
        lat = nn.encoder_forward(x, tiny_weights(2), TINY)
        assert not np.allclose(lat[0], lat[1])

    def test_non_finite_reports_block(self):
        w = tiny_weights()
        w["enc.blocks.1.fc2.b"][0] = np.inf
        with pytest.raises(NNError, match="enc block 1"):
            nn.encoder_forward(np.zeros((2, TINY.token_dim)), w, TINY)

    def test_too_many_tokens(self):
        with pytest.raises(NNError):
            nn.encoder_forward(np.zeros((9, TINY.token_dim)), tiny_weights(), TINY)


class TestDecoder:
    def test_shape(self):
        lat = np.random.default_rng(0).normal(size=(4, 16))
        assert nn.decoder_forward(lat, tiny_weights(), TINY).shape == (4, 8)

    def test_bias_only(self):
        w = tiny_weights().zeros_like()
        w["dec.head.b"][:] = np.arange(8)
        out = nn.decoder_forward(np.zeros((4, 16)), w, TINY)
        assert np.array_equal(out, np.tile(np.arange(8, dtype=np.float32), (4, 1)))

    def test_eval_deterministic(self):
        lat = np.random.default_rng(3).normal(size=(5, 16))
        w = tiny_weights(3)
        assert np.array_equal(nn.decoder_forward(lat, w, TINY), nn.decoder_forward(lat, w, TINY))


class TestClassifier:
    def test_zero_head_half(self):
        w = tiny_weights()
        w["cls.head.W"][:] = 0
        z = nn.classifier_forward(np.random.default_rng(0).normal(size=(6, 16)), w, TINY)
        assert z == 0.5

    def test_bias_monotone(self):
        lat = np.random.default_rng(1).normal(size=(6, 16))
        w = tiny_weights(1)
        zs = []
        for b in (-1.0, 0.0, 0.5, 2.0):
            w["cls.head.b"][:] = b
            zs.append(nn.classifier_forward(lat, w, TINY))
        assert all(a < b for a, b in zip(zs, zs[1:]))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        lat = rng.normal(size=(8, 16)).astype(np.float32)
        w = tiny_weights(2, np.float64)
        perm = rng.permutation(8)
        a = nn.classifier_forward(lat, w, TINY)
        b = nn.classifier_forward(lat[perm], w, TINY, positions=perm)
        assert a == pytest.approx(b, rel=1e-12)

    def test_open_interval(self):
        w = tiny_weights()
        lat = np.random.default_rng(3).normal(size=(4, 16))
        for bias in (-1e4, 1e4):
            w["cls.head.b"][:] = bias
            z = nn.classifier_forward(lat, w, TINY)
            assert 0.0 < z < 1.0


class TestLosses:
    def test_pretrain_exact_prediction(self):
        w = tiny_weights()
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(2, 8, TINY.token_dim)).astype(np.float32)
        mask = np.ones((2, 8), bool)
        target = nn.decoder_forward(nn.encoder_forward(feats, w, TINY, mask), w, TINY, mask)
        loss, g = nn.loss_and_grads(nn.Batch(mask=mask, features=feats, target=target), w, TINY, "pretrain")
        assert loss == 0.0
        assert not g["dec.head.W"].any() and not g["dec.head.b"].any()

    def test_bce_values(self):
        loss, _ = nn.bce_loss(np.array([0.0]), np.array([1.0]))
        assert loss == pytest.approx(math.log(2))
        loss, _ = nn.bce_loss(np.array([40.0, -40.0]), np.array([1.0, 0.0]))
        assert loss < 1e-15

    def test_unknown_mode(self):
        with pytest.raises(NNError):
            nn.loss_and_grads(nn.Batch(mask=np.ones((1, 2), bool)), tiny_weights(), TINY, "finetune")


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("mode", ["pretrain", "classify"])
def test_gradients_match_finite_differences(seed, mode):
    r = gradcheck.check(TINY, seed, mode)
    assert r["frozen_zero"]
    assert r["rel64"][0] < 1e-6, r["rel64"]
    assert r["rel32"][0] < 1e-3, r["rel32"]


def test_frozen_encoder_bit_identical():
    w = tiny_weights(4)
    before = {k: v.copy() for k, v in w.items() if k.startswith("enc.")}
    state = nn.OptimizerState(lr_base=1e-2, trainable=("cls.",))
    rng = np.random.default_rng(4)
    batch = nn.Batch(mask=np.ones((4, 8), bool), features=rng.normal(size=(4, 8, TINY.token_dim)),
                     labels=np.array([0, 1, 0, 1.0]))
    for _ in range(10):
        _, g = nn.loss_and_grads(batch, w, TINY, "classify")
        nn.adamw_step(w, g, state)
    assert all(np.array_equal(w[k], before[k]) for k in before)


def test_loss_descent():
    w = tiny_weights(5)
    rng = np.random.default_rng(5)
    batch = nn.Batch(mask=np.ones((4, 8), bool), features=rng.normal(size=(4, 8, TINY.token_dim)),
                     target=rng.normal(size=(4, 8, TINY.spec_bins)))
    state = nn.OptimizerState(lr_base=3e-3)
    losses = []
    for _ in range(200):
        loss, g = nn.loss_and_grads(batch, w, TINY, "pretrain")
        losses.append(loss)
        nn.adamw_step(w, g, state)
    assert losses[-1] < 0.5 * losses[0]


class TestAdamW:
    def test_decay_only(self):
        w = nn.ModelWeights(a=np.array([1.0, -2.0]))
        st = nn.OptimizerState(lr_base=0.1, weight_decay=0.01)
        nn.adamw_step(w, w.zeros_like(), st)
        np.testing.assert_allclose(w["a"], np.array([1.0, -2.0]) * (1 - 0.1 * 0.01))
        assert st.step == 1

    def test_first_step(self):
        g = np.array([0.3, -1e-3, 5.0])
        w = nn.ModelWeights(a=np.zeros(3))
        st = nn.OptimizerState(lr_base=0.01, weight_decay=0.0)
        nn.adamw_step(w, nn.ModelWeights(a=g), st)
        np.testing.assert_allclose(w["a"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-6)

    def test_deterministic(self):
        def run():
            w = nn.ModelWeights(a=np.linspace(-1, 1, 5))
            st = nn.OptimizerState(lr_base=0.05)
            for g in ([1, 2, 3, 4, 5], [-1, 0, 1, 0, -1]):
                nn.adamw_step(w, nn.ModelWeights(a=np.array(g, float)), st)
            return w["a"]
        assert np.array_equal(run(), run())

    def test_float32_stays_float32(self):
        w = tiny_weights()
        st = nn.OptimizerState()
        nn.adamw_step(w, w.zeros_like(), st)
        assert all(v.dtype == np.float32 for v in w.values())


class TestSchedule:
    def test_points(self):
        assert nn.lr_schedule(0, 100, 10, 1e-3) == 0.0
        assert nn.lr_schedule(10, 100, 10, 1e-3) == pytest.approx(1e-3)
        assert nn.lr_schedule(55, 100, 10, 1e-3) == pytest.approx(5e-4)
        assert nn.lr_schedule(100, 100, 10, 1e-3) == pytest.approx(0.0, abs=1e-18)

    def test_invalid(self):
        with pytest.raises(ValueError):
            nn.lr_schedule(0, 10, 10, 1e-3)
        with pytest.raises(ValueError):
            nn.lr_schedule(11, 10, 1, 1e-3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        w = tiny_weights(6)
        p = nn.save_checkpoint(tmp_path / "m.somn", w, TINY)
        w2, cfg2 = nn.load_checkpoint(p)
        assert cfg2 == TINY and list(w2) == list(w)
        assert all(np.array_equal(w[k], w2[k]) for k in w)
        nn.save_checkpoint(tmp_path / "m2.somn", w2, cfg2)
        assert (tmp_path / "m2.somn").read_bytes() == p.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(p)

    def test_truncated(self, tmp_path):
        p = nn.save_checkpoint(tmp_path / "m.somn", tiny_weights(), TINY)
        p.write_bytes(p.read_bytes()[:-7])
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(p)


class TestConfig:
    def test_presets(self):
        paper = nn.preset("paper")
        assert (paper.embed_dim, paper.n_enc_blocks, paper.n_heads, paper.n_dec_blocks) == (768, 8, 8, 8)
        assert (paper.n_cls_layers, paper.n_cls_heads) == (4, 4)
        desk = nn.preset("desk")
        assert (desk.embed_dim, desk.n_enc_blocks, desk.n_dec_blocks, desk.n_cls_layers) == (64, 4, 4, 2)

    def test_heads_divide(self):
        with pytest.raises(nn.ConfigError):
            nn.ModelConfig(embed_dim=30, n_heads=4)

    def test_json_round_trip(self):
        cfg = nn.preset("desk")
        assert nn.ModelConfig.from_json(cfg.to_json()) == cfg


def test_attention_large_scores_finite():
    rng = np.random.default_rng(7)
    p = {"qkv.W": rng.normal(size=(16, 48)) * 50, "qkv.b": np.zeros(48),
         "out.W": np.eye(16), "out.b": np.zeros(16)}
    x = rng.normal(size=(1, 6, 16)) * 50
    mask = np.array([[True] * 4 + [False] * 2])
    y, cache = ops.attention_fwd(x, p, 2, mask)
    assert np.isfinite(y).all()
    a = cache[5]
    assert np.all(a[..., 4:] == 0.0)
    np.testing.assert_allclose(a.sum(-1), 1.0)
