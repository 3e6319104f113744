import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmle2e import sigproc as sp
from dmle2e.errors import (
    DegenerateInputError,
    FormatError,
    InvalidArgumentError,
    OutOfRangeError,
)


class TestWaveform:
    def test_invariants(self):
        w = sp.Waveform([1.0, 2.0], 10.0)
        assert len(w) == 2 and w.duration == 0.2

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidArgumentError):
            sp.Waveform([1.0, np.nan], 10.0)

    def test_rejects_bad_rate(self):
        with pytest.raises(InvalidArgumentError):
            sp.Waveform([1.0], 0.0)

    def test_samples_read_only(self):
        w = sp.Waveform([1.0, 2.0], 1.0)
        with pytest.raises(ValueError):
            w.samples[0] = 5.0


class TestDesignRrc:
    def test_17_taps_alpha01(self):
        f = sp.design_rrc(17, 0.1, 2)
        assert len(f) == 17
        assert int(np.argmax(f.taps)) == 8

    def test_symmetry_exact_and_unit_energy(self):
        f = sp.design_rrc(17, 0.1, 2)
        assert np.array_equal(f.taps, f.taps[::-1])
        assert abs(np.sum(f.taps**2) - 1.0) < 1e-12

    def test_zero_rolloff_is_sinc(self):
        sps = 4
        f = sp.design_rrc(129, 0.0, sps)
        center = 64
        # sinc zero crossings at nonzero multiples of sps from center
        for k in range(1, 16):
            assert abs(f.taps[center + k * sps]) < 1e-9
            assert abs(f.taps[center - k * sps]) < 1e-9

    def test_matched_cascade_isi(self):
        # independent oracle: direct numeric convolution, symbol-spaced taps
        f = sp.design_rrc(17, 0.1, 2)
        cascade = np.convolve(f.taps, f.taps)
        peak = int(np.argmax(cascade))
        symbol_spaced = cascade[peak % 2 :: 2]
        k0 = (peak - peak % 2) // 2
        off_peak = np.delete(symbol_spaced, k0)
        assert np.max(np.abs(off_peak)) <= 5e-2 * cascade[peak]

    def test_even_taps_rejected(self):
        with pytest.raises(InvalidArgumentError):
            sp.design_rrc(16, 0.1, 2)

    def test_bad_rolloff_rejected(self):
        with pytest.raises(InvalidArgumentError):
            sp.design_rrc(17, 1.5, 2)

    def test_singular_time_point_finite(self):
        # t = T/(4*alpha) lands on a tap for alpha=0.25, sps=1
        f = sp.design_rrc(9, 0.25, 1)
        assert np.all(np.isfinite(f.taps))


class TestDesignSupergaussian:
    def test_dc_gain_exactly_one(self):
        f = sp.design_supergaussian(9, 2, 25e9, 65e9)
        assert abs(f.taps.sum() - 1.0) < 1e-12

    def test_prototype_value_at_cutoff(self):
        assert abs(math.exp(-0.5) - 0.6065) < 1e-4

    def test_gain_at_cutoff_after_truncation(self):
        f = sp.design_supergaussian(9, 2, 25e9, 65e9)
        h = np.fft.rfft(f.taps, 8192)
        freqs = np.fft.rfftfreq(8192, 1.0 / 65e9)
        idx = int(np.argmin(np.abs(freqs - 25e9)))
        assert abs(abs(h[idx]) - math.exp(-0.5)) < 0.1 * math.exp(-0.5)

    def test_cutoff_above_nyquist_rejected(self):
        with pytest.raises(InvalidArgumentError):
            sp.design_supergaussian(9, 2, 40e9, 65e9)


class TestFirApply:
    def test_identity(self):
        w = sp.Waveform([1.0, -2.0, 3.0], 1.0)
        out = sp.fir_apply(w, sp.FirFilter([1.0]))
        assert np.allclose(out.samples, w.samples)

    def test_two_tap_alignment(self):
        w = sp.Waveform([0.0, 1.0, 0.0, 0.0], 1.0)
        out = sp.fir_apply(w, sp.FirFilter([0.5, 0.5]))
        assert np.allclose(out.samples, [0.0, 0.5, 0.5, 0.0])

    def test_linearity(self, rng):
        a = sp.Waveform(rng.normal(size=256), 1.0)
        b = sp.Waveform(rng.normal(size=256), 1.0)
        f = sp.FirFilter(rng.normal(size=9))
        lhs = sp.fir_apply(sp.Waveform(a.samples + b.samples, 1.0), f).samples
        rhs = sp.fir_apply(a, f).samples + sp.fir_apply(b, f).samples
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_shift_equivariance_interior(self, rng):
        x = rng.normal(size=128)
        f = sp.FirFilter(rng.normal(size=7))
        y = sp.fir_apply(sp.Waveform(x, 1.0), f).samples
        x2 = np.roll(x, 5)
        y2 = sp.fir_apply(sp.Waveform(x2, 1.0), f).samples
        assert np.allclose(y2[16:-16], np.roll(y, 5)[16:-16])

    def test_rate_preserved(self):
        w = sp.Waveform([1.0, 2.0, 3.0], 7e9)
        assert sp.fir_apply(w, sp.FirFilter([1.0])).sample_rate == 7e9


class TestUpsample:
    def test_identity(self):
        assert np.array_equal(sp.upsample_insert([1.0, 2.0], 1), [1.0, 2.0])

    def test_zero_stuffing(self):
        assert np.array_equal(sp.upsample_insert([1.0, 2.0], 2), [1.0, 0.0, 2.0, 0.0])

    def test_energy_preserved(self, rng):
        x = rng.normal(size=50)
        up = sp.upsample_insert(x, 4)
        assert abs(np.sum(x**2) - np.sum(up**2)) < 1e-12


class TestResample:
    def test_identity_rate(self):
        w = sp.Waveform([1.0, 2.0, 3.0], 40e9)
        out = sp.resample(w, 40e9)
        assert np.array_equal(out.samples, w.samples)

    def test_sine_amplitude_preserved(self):
        t = np.arange(4000) / 40e9
        w = sp.Waveform(np.sin(2 * np.pi * 5e9 * t), 40e9)
        out = sp.resample(w, 65e9)
        t2 = np.arange(len(out)) / 65e9
        expect = np.sin(2 * np.pi * 5e9 * t2)
        err = np.abs(out.samples[100:-100] - expect[100 : len(out) - 100])
        assert err.max() < 0.01

    def test_round_trip(self, rng):
        # band-limited input: smooth noise at 80% of the lower Nyquist
        x = rng.normal(size=4096)
        spec = np.fft.rfft(x)
        freqs = np.fft.rfftfreq(4096, 1 / 40e9)
        spec[freqs > 0.8 * 20e9] = 0
        x = np.fft.irfft(spec, 4096)
        x /= np.abs(x).max()
        w = sp.Waveform(x, 40e9)
        back = sp.resample(sp.resample(w, 65e9), 40e9)
        n = min(len(back), len(w))
        err = np.abs(back.samples[:n] - w.samples[:n])[64:-64]
        assert err.max() < 1e-3

    def test_irrational_ratio_rejected(self):
        w = sp.Waveform(np.ones(16), 1.0)
        with pytest.raises(InvalidArgumentError):
            sp.resample(w, math.pi, max_denominator=50)


class TestSynchronize:
    def test_zero_lag(self, rng):
        w = sp.Waveform(rng.normal(size=256), 1.0)
        assert sp.synchronize(w, w) == 0

    def test_constructed_shift(self, rng):
        x = rng.normal(size=300)
        ref = sp.Waveform(x[: 256], 1.0)
        meas = sp.Waveform(np.concatenate([np.zeros(7), x[:293]]), 1.0)
        assert sp.synchronize(ref, meas) == 7

    def test_noisy_recovery_monte_carlo(self):
        # >= 99% correct over 100 trials at 10 dB SNR
        master = np.random.default_rng(99)
        hits = 0
        for _ in range(100):
            x = master.normal(size=400)
            lag = int(master.integers(0, 40))
            delayed = np.concatenate([np.zeros(lag), x])[:400]
            noisy = delayed + master.normal(size=400) * 10 ** (-10 / 20)
            got = sp.synchronize(sp.Waveform(x[:300], 1.0), sp.Waveform(noisy, 1.0))
            hits += got == lag
        assert hits >= 99

    def test_all_zero_rejected(self):
        with pytest.raises(DegenerateInputError):
            sp.synchronize(sp.Waveform(np.zeros(64), 1.0), sp.Waveform(np.zeros(64), 1.0))

    def test_rate_mismatch_rejected(self):
        a = sp.Waveform(np.ones(8), 1.0)
        b = sp.Waveform(np.arange(8.0), 2.0)
        with pytest.raises(InvalidArgumentError):
            sp.synchronize(a, b)


class TestAverageCopies:
    def test_identical_copies(self, rng):
        w = sp.Waveform(rng.normal(size=64), 1.0)
        out = sp.average_copies([w, w, w])
        assert np.allclose(out.samples, w.samples)

    def test_symmetric_pair(self, rng):
        x = rng.normal(size=64)
        eps = rng.normal(size=64)
        out = sp.average_copies(
            [sp.Waveform(x + eps, 1.0), sp.Waveform(x - eps, 1.0)]
        )
        assert np.allclose(out.samples, x)

    def test_noise_reduction_25x(self):
        rng = np.random.default_rng(7)
        x = np.sin(np.linspace(0, 20, 2048))
        sigma = 0.3
        copies = [sp.Waveform(x + rng.normal(0, sigma, 2048), 1.0) for _ in range(25)]
        resid = sp.average_copies(copies).samples - x
        assert abs(np.var(resid) / (sigma**2 / 25) - 1.0) < 0.2

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(InvalidArgumentError):
            sp.average_copies([sp.Waveform([1.0, 2.0], 1.0), sp.Waveform([1.0], 1.0)])


class TestNormalize01:
    def test_basic(self):
        out, scale, offset = sp.normalize01(sp.Waveform([2.0, 4.0, 6.0], 1.0))
        assert np.allclose(out.samples, [0.0, 0.5, 1.0])
        assert scale == 4.0 and offset == 2.0

    def test_already_normalized(self):
        out, scale, offset = sp.normalize01(sp.Waveform([0.0, 0.25, 1.0], 1.0))
        assert np.allclose(out.samples, [0.0, 0.25, 1.0])
        assert scale == 1.0 and offset == 0.0

    def test_round_trip(self, rng):
        x = rng.normal(size=128) * 3.7 + 11
        out, scale, offset = sp.normalize01(sp.Waveform(x, 1.0))
        assert np.max(np.abs(out.samples * scale + offset - x)) < 1e-12

    def test_constant_rejected(self):
        with pytest.raises(DegenerateInputError):
            sp.normalize01(sp.Waveform(np.full(16, 3.0), 1.0))


class TestEstimateSnr:
    def _copies(self, snr_db, rng, n=25, length=4096):
        x = np.sin(np.linspace(0, 60, length)) * 2.0
        sig_power = np.var(x)
        sigma = math.sqrt(sig_power / 10 ** (snr_db / 10))
        return [sp.Waveform(x + rng.normal(0, sigma, length), 1.0) for _ in range(n)]

    def test_known_20db(self):
        rng = np.random.default_rng(5)
        est = sp.estimate_snr(self._copies(20.0, rng))
        assert abs(est - 20.0) < 0.5

    def test_noiseless_infinite(self):
        x = sp.Waveform(np.sin(np.linspace(0, 10, 256)), 1.0)
        assert sp.estimate_snr([x, x]) == math.inf

    def test_amplitude_doubling_adds_6db(self):
        rng = np.random.default_rng(6)
        length = 8192
        x = np.sin(np.linspace(0, 60, length))
        sigma = 0.05
        noise = [rng.normal(0, sigma, length) for _ in range(25)]
        a = sp.estimate_snr([sp.Waveform(x + n, 1.0) for n in noise])
        b = sp.estimate_snr([sp.Waveform(2 * x + n, 1.0) for n in noise])
        assert abs((b - a) - 6.02) < 0.3

    def test_common_offset_invariant(self, rng):
        copies = self._copies(15.0, rng)
        base = sp.estimate_snr(copies)
        shifted = [sp.Waveform(c.samples + 42.0, 1.0) for c in copies]
        assert abs(sp.estimate_snr(shifted) - base) < 1e-9


class TestPsd:
    def test_white_noise_flat(self):
        rng = np.random.default_rng(3)
        w = sp.Waveform(rng.normal(size=51200), 1e9)
        s = sp.psd(w, 512)
        db = 10 * np.log10(s.psd[2:-2])
        assert db.max() - db.min() < 3.0

    def test_sine_peak_placement(self):
        f0 = 5e9
        t = np.arange(16384) / 40e9
        w = sp.Waveform(np.sin(2 * np.pi * f0 * t), 40e9)
        s = sp.psd(w, 1024)
        assert abs(s.freqs[int(np.argmax(s.psd))] - f0) <= 40e9 / 1024

    def test_parseval(self, rng):
        w = sp.Waveform(rng.normal(size=32768) + 0.7, 2e9)
        s = sp.psd(w, 1024)
        df = s.freqs[1] - s.freqs[0]
        total = np.sum(s.psd) * df
        mean_power = np.mean(w.samples**2)
        assert abs(total - mean_power) / mean_power < 0.05

    def test_segment_too_long_rejected(self):
        with pytest.raises(InvalidArgumentError):
            sp.psd(sp.Waveform(np.ones(64), 1.0), 128)


class TestBwAtLevel:
    def test_brickwall(self):
        freqs = np.linspace(0, 1e9, 1001)
        psd = np.where(freqs <= 3e8, 1.0, 1e-9)
        s = sp.Spectrum(freqs, psd, 1e6)
        bw = sp.bw_at_level(s, 10.0)
        assert abs(bw - 3e8) <= 1e6

    def test_gaussian_analytic(self):
        sigma = 2e8
        freqs = np.linspace(0, 2e9, 4001)
        psd = np.exp(-(freqs**2) / (2 * sigma**2))
        s = sp.Spectrum(freqs, psd, 1e6)
        expect = sigma * math.sqrt(2 * math.log(10))
        assert abs(sp.bw_at_level(s, 10.0) - expect) / expect < 0.02

    @given(st.floats(min_value=1.05, max_value=3.0))
    @settings(max_examples=20, deadline=None)
    def test_widening_never_shrinks(self, stretch):
        freqs = np.linspace(0, 1e9, 2001)
        sigma = 1.5e8
        narrow = sp.Spectrum(freqs, np.exp(-(freqs**2) / (2 * sigma**2)), 1e6)
        wide = sp.Spectrum(
            freqs, np.exp(-(freqs**2) / (2 * (stretch * sigma) ** 2)), 1e6
        )
        assert sp.bw_at_level(wide, 10.0) >= sp.bw_at_level(narrow, 10.0)

    def test_level_never_crossed(self):
        freqs = np.linspace(0, 1e9, 101)
        s = sp.Spectrum(freqs, np.ones(101), 1e6)
        with pytest.raises(OutOfRangeError):
            sp.bw_at_level(s, 10.0)


class TestSerialization:
    def test_csv_round_trip(self, tmp_path, rng):
        w = sp.Waveform(rng.normal(size=64), 40e9)
        path = tmp_path / "wave.csv"
        sp.write_csv(w, path)
        back = sp.read_csv(path)
        assert back.sample_rate == w.sample_rate
        assert np.array_equal(back.samples, w.samples)

    def test_binary_round_trip(self, tmp_path, rng):
        w = sp.Waveform(rng.normal(size=129), 65e9)
        path = tmp_path / "wave.bin"
        sp.write_binary(w, path)
        back = sp.read_binary(path)
        assert back.sample_rate == w.sample_rate
        assert np.array_equal(back.samples, w.samples)

    def test_binary_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTWAVES" + b"\x00" * 16)
        with pytest.raises(FormatError):
            sp.read_binary(path)

    def test_binary_truncated(self, tmp_path, rng):
        w = sp.Waveform(rng.normal(size=16), 1e9)
        path = tmp_path / "wave.bin"
        sp.write_binary(w, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 5])
        with pytest.raises(FormatError):
            sp.read_binary(path)


class TestAlign:
    def test_align_trims_consistently(self, rng):
        x = rng.normal(size=256)
        ref = sp.Waveform(x, 1.0)
        meas = sp.Waveform(np.concatenate([np.zeros(5), x])[:256], 1.0)
        ref_t, meas_t, lag = sp.align(ref, meas)
        assert lag == 5
        assert len(ref_t) == len(meas_t)
        assert np.allclose(ref_t.samples, meas_t.samples)
