import json

import numpy as np
import pytest

from dmle2e import baselines as bl
from dmle2e import sigproc as sp
from dmle2e.errors import InvalidArgumentError


def _clean_pam(rng, n_sym, isi=None, quad=0.0):
    """Synthetic 2 SpS capture: centered PAM levels, optional channel."""
    frame = sp.SymbolFrame(rng.integers(0, 4, n_sym), 20e9)
    x = sp.upsample_insert(bl.TX_LEVELS_CENTERED[frame.indices], 2)
    if isi is not None:
        x = np.convolve(x, isi, mode="same")
    if quad:
        x = x + quad * x**2
    return sp.Waveform(x, 40e9), frame


class TestTxRrc:
    def test_unit_rms(self, rng):
        w = bl.tx_rrc(sp.SymbolFrame(rng.integers(0, 4, 500), 20e9))
        assert abs(np.sqrt(np.mean(w.samples**2)) - 1.0) < 1e-12

    def test_constant_symbols_flat_interior(self):
        # constant symbols through an LTI chain: each 2-SpS phase settles to
        # its own constant (interpolation ripple is phase-periodic)
        w = bl.tx_rrc(sp.SymbolFrame(np.full(200, 3), 20e9))
        interior = w.samples[40:-40]
        for phase in (0, 1):
            vals = interior[phase::2]
            assert np.ptp(vals) < 1e-9 * max(1.0, np.abs(vals).max())

    def test_minus10db_bandwidth_matches_rrc_theory(self, rng):
        # PSD of an RRC-shaped PAM stream: |H(f)|^2 falls to -10 dB inside
        # the rolloff region, i.e. between (1-a)Rs/2 and (1+a)Rs/2
        w = bl.tx_rrc(sp.SymbolFrame(rng.integers(0, 4, 8192), 20e9))
        s = sp.psd(w, 1024)
        bw = sp.bw_at_level(s, 10.0)
        assert (1 - bl.RRC_ROLLOFF) * 10e9 * 0.9 < bw < (1 + bl.RRC_ROLLOFF) * 10e9 * 1.1

    def test_rx_matched_cascade_isi(self, rng):
        # delta channel: tx + matched filter sampled at symbol instants
        n = 4000
        frame = sp.SymbolFrame(rng.integers(0, 4, n), 20e9)
        tx = bl.tx_rrc(frame)
        out = bl.rx_matched(tx)
        # equalizer-free detection: scale to targets by least squares
        y = out.samples[::2]
        target = bl.TX_LEVELS_CENTERED[frame.indices]
        a = np.dot(y[64:-64], target[64:-64]) / np.dot(target[64:-64], target[64:-64])
        resid = y[64:-64] - a * target[64:-64]
        # residual ISI well under half the level spacing
        assert np.abs(resid).std() < 0.15 * np.abs(np.diff(bl.TX_LEVELS_CENTERED)).min() * a

    def test_rx_matched_linear_and_length(self, rng):
        a = sp.Waveform(rng.normal(size=256), 40e9)
        b = sp.Waveform(rng.normal(size=256), 40e9)
        lhs = bl.rx_matched(sp.Waveform(a.samples + b.samples, 40e9)).samples
        rhs = bl.rx_matched(a).samples + bl.rx_matched(b).samples
        assert np.allclose(lhs, rhs, atol=1e-12)
        assert len(bl.rx_matched(a)) == 256


class TestFitEqualizer:
    def test_identity_channel_recovers_delta(self, rng):
        rx, frame = _clean_pam(rng, 1500)
        model = bl.fit_equalizer("ffe", rx, frame)
        out = bl.equalize(model, rx.samples, np.arange(20, 1400))
        target = bl.TX_LEVELS_CENTERED[frame.indices[20:1400]]
        assert np.mean((out - target) ** 2) < 1e-6
        # dominant single tap
        mags = np.abs(model.linear_taps)
        assert mags.max() > 5 * np.sort(mags)[-2]

    def test_isi_channel_ffe_gain(self, rng):
        # symbol-spaced two-tap ISI: y[i] = x[i] + 0.4 x[i-2] at 2 SpS
        rx, frame = _clean_pam(rng, 2000, isi=np.array([0.0, 0.0, 1.0, 0.0, 0.4]))
        model = bl.fit_equalizer("ffe", rx, frame)
        idx = np.arange(20, 1900)
        out = bl.equalize(model, rx.samples, idx)
        target = bl.TX_LEVELS_CENTERED[frame.indices[idx]]
        mse_eq = np.mean((out - target) ** 2)
        raw = rx.samples[2 * idx] * 0.5  # unequalized, rescaled
        a = np.dot(raw, target) / np.dot(raw, raw)
        mse_raw = np.mean((a * raw - target) ** 2)
        assert mse_eq < mse_raw / 10

    def test_quadratic_channel_vnle_beats_ffe(self, rng):
        rx, frame = _clean_pam(rng, 3000, quad=0.2)
        ffe = bl.fit_equalizer("ffe", rx, frame)
        vnle = bl.fit_equalizer("vnle", rx, frame)
        idx = np.arange(20, 2900)
        target = bl.TX_LEVELS_CENTERED[frame.indices[idx]]
        mse_f = np.mean((bl.equalize(ffe, rx.samples, idx) - target) ** 2)
        mse_v = np.mean((bl.equalize(vnle, rx.samples, idx) - target) ** 2)
        assert mse_v < 0.5 * mse_f

    def test_vnle_features_superset_training_mse(self, rng):
        rx, frame = _clean_pam(rng, 2500, isi=np.array([0.9, 0.5, 0.1]), quad=0.1)
        idx = np.arange(20, 2400)
        target = bl.TX_LEVELS_CENTERED[frame.indices[idx]]
        mse = {}
        for kind in ("ffe", "vnle"):
            m = bl.fit_equalizer(kind, rx, frame)
            mse[kind] = np.mean((bl.equalize(m, rx.samples, idx) - target) ** 2)
        assert mse["vnle"] <= mse["ffe"] * (1 + 1e-9)

    def test_normal_equation_oracle(self, rng):
        # brute-force ridge normal equations vs the implementation
        rx, frame = _clean_pam(rng, 1600, isi=np.array([1.0, 0.3]))
        model = bl.fit_equalizer("vnle", rx, frame)
        margin = bl.N_LINEAR_TAPS // 4 + 2
        n_sym = min(len(frame.indices), len(rx.samples) // 2)
        sym_idx = np.arange(margin, n_sym - margin)
        X = bl._feature_matrix(rx.samples, sym_idx, "vnle")
        y = bl.TX_LEVELS_CENTERED[frame.indices[sym_idx]]
        gram = X.T @ X
        lam = 1e-6 * np.trace(gram) / gram.shape[0]
        oracle = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), X.T @ y)
        got = np.concatenate(
            [model.linear_taps, model.second_order_taps, [model.bias_term]]
        )
        assert np.max(np.abs(got - oracle)) / np.max(np.abs(oracle)) < 1e-8

    def test_insufficient_training_rejected(self, rng):
        rx, frame = _clean_pam(rng, 300)
        with pytest.raises(InvalidArgumentError):
            bl.fit_equalizer("ffe", rx, frame)

    def test_cross_term_variant(self, rng):
        rx, frame = _clean_pam(rng, 2500, quad=0.15)
        m = bl.fit_equalizer("vnle", rx, frame, second_order="cross")
        assert m.second_order == "cross"
        assert m.second_order_taps.shape == (10,)


class TestMlDetect:
    def test_equal_variances_is_nearest_mean(self, rng):
        means = np.array([-0.5, -1 / 6, 1 / 6, 0.5])
        y = rng.uniform(-0.7, 0.7, 200)
        got = bl.ml_detect(y, means, np.full(4, 0.01))
        expect = np.argmin(np.abs(y[:, None] - means), axis=1)
        assert np.array_equal(got, expect)

    def test_variance_penalty_flips_decision(self):
        means = np.array([0.0, 1.0, 2.0, 3.0])
        varis = np.array([1.0, 1.0, 1.0, 100.0])
        assert bl.ml_detect(np.array([2.8]), means, varis)[0] == 2

    def test_midpoint_tie_goes_low(self):
        means = np.array([0.0, 1.0, 2.0, 3.0])
        varis = np.ones(4)
        assert bl.ml_detect(np.array([0.5]), means, varis)[0] == 0

    def test_affine_invariance_with_equal_variances(self, rng):
        means = np.array([-0.5, -1 / 6, 1 / 6, 0.5])
        y = rng.uniform(-0.6, 0.6, 100)
        base = bl.ml_detect(y, means, np.full(4, 0.02))
        a, b = 3.0, -1.2
        moved = bl.ml_detect(a * y + b, a * means + b, np.full(4, 0.02 * a * a))
        assert np.array_equal(base, moved)


class TestEqualizerSerialization:
    def test_json_round_trip(self, rng):
        rx, frame = _clean_pam(rng, 1600)
        m = bl.fit_equalizer("vnle", rx, frame)
        back = bl.EqualizerModel.from_json(m.to_json())
        assert back.to_json() == m.to_json()
        assert np.array_equal(back.linear_taps, m.linear_taps)


@pytest.mark.slow
class TestRunBaseline:
    def test_easy_regime_low_ser(self, channel_cfg):
        import dataclasses

        from dmle2e.channel import AnalogChainParams, ChannelConfig

        quiet = ChannelConfig(channel_cfg.laser, AnalogChainParams(noise_sigma=0.02))
        out = bl.run_baseline(
            "ffe", quiet, 75.0, 0.0, 4000, 12000, seed=5, symbol_rate=20e9
        )
        assert out["ser"] < 1e-3

    def test_deterministic(self, channel_cfg):
        a = bl.run_baseline("ffe", channel_cfg, 75.0, 0.0, 3000, 6000, seed=9)
        b = bl.run_baseline("ffe", channel_cfg, 75.0, 0.0, 3000, 6000, seed=9)
        assert a["ser"] == b["ser"]
        assert np.array_equal(
            a["model"].linear_taps, b["model"].linear_taps
        )

    def test_vnle_not_worse_at_high_drive(self, channel_cfg):
        kw = dict(i_bias_ma=60.0, p_rf_dbm=2.0, n_train=4000, n_test=20000,
                  seed=3, symbol_rate=30e9)
        ffe = bl.run_baseline("ffe", channel_cfg, **kw)
        vnle = bl.run_baseline("vnle", channel_cfg, **kw)
        assert vnle["ser"] <= ffe["ser"] * 1.05 + 1e-4
