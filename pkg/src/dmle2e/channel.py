"""Software stand-in for the experimental link: drive conditioning,
rate-equation laser, photodetection and capture.

The laser is a single-mode two-variable (carrier N, photon S) rate-equation
model with gain compression; chirp and intrinsic laser noise are omitted
(direct detection sees power only; all stochasticity is lumped into
output-referred additive Gaussian noise at the scope). Optical power uses a
slope-efficiency convention: P = eta * q * V * S / (Gamma * tau_p), so the
L-I slope above threshold is eta watts per ampere.

All numeric defaults live in ``configs/channel.default.json``, chosen so
the laser thresholds near 10 mA and its relaxation resonance sits around
10 GHz at 75 mA, which makes 20/30 GBaud 4PAM genuinely bandwidth- and
nonlinearity-stressed.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources

import numpy as np
from numba import njit
from scipy import signal as _sps

from .errors import InvalidArgumentError, NumericError
from .sigproc import (
    FirFilter,
    Waveform,
    design_linear_phase_fir,
    design_supergaussian,
    fir_apply,
    resample,
)


@dataclass(frozen=True)
class LaserParams:
    """Physical constants of the rate-equation laser."""

    active_volume: float          # cm^3
    confinement: float            # dimensionless Gamma
    gain_coeff: float             # cm^3/s (v_g * a product)
    transparency_density: float   # cm^-3
    gain_compression: float       # cm^3 (epsilon)
    carrier_lifetime: float       # s
    photon_lifetime: float        # s
    spont_fraction: float         # dimensionless beta
    external_efficiency: float    # W/A slope efficiency
    electron_charge: float = 1.602176634e-19  # C

    def __post_init__(self):
        for name in (
            "active_volume", "confinement", "gain_coeff", "transparency_density",
            "gain_compression", "carrier_lifetime", "photon_lifetime",
            "spont_fraction", "external_efficiency", "electron_charge",
        ):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"LaserParams.{name} must be positive")
        if not 0.0 < self.spont_fraction < 1.0:
            raise InvalidArgumentError("spont_fraction must lie in (0,1)")
        if not 0.0 < self.external_efficiency <= 1.0:
            raise InvalidArgumentError("external_efficiency must lie in (0,1] W/A")

    @property
    def threshold_density(self) -> float:
        """Carrier density where modal gain equals cavity loss."""
        return self.transparency_density + 1.0 / (
            self.confinement * self.gain_coeff * self.photon_lifetime
        )

    @property
    def threshold_current_ma(self) -> float:
        """Analytic threshold: q*V*N_th/tau_n, in mA."""
        amps = (
            self.electron_charge
            * self.active_volume
            * self.threshold_density
            / self.carrier_lifetime
        )
        return amps * 1e3


@dataclass(frozen=True)
class AnalogChainParams:
    """AWG, RF amplifier, photodetector and sampling-scope chain."""

    awg_rate: float = 65e9
    awg_bw: float = 25e9
    awg_filter_taps: int = 9
    amp_gain_db: float = 13.0
    amp_bw: float = 38e9
    amp_filter_taps: int = 21
    pd_bw: float = 50e9
    pd_filter_taps: int = 21
    dso_bw: float = 33e9
    dso_filter_taps: int = 31
    dso_rate: float = 80e9
    analog_rate: float = 130e9  # internal rate; must exceed 2x every BW
    load_ohms: float = 50.0
    mod_transconductance: float = 0.012  # A/V
    noise_sigma: float = 0.3             # AWGN std in capture units (mW-scale)
    rk4_substeps_per_awg_sample: int = 8

    def __post_init__(self):
        for name in ("awg_bw", "amp_bw", "pd_bw", "dso_bw"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.awg_rate <= 2 * self.awg_bw:
            raise InvalidArgumentError("awg_rate must exceed twice awg_bw")
        for name in ("amp_bw", "pd_bw", "dso_bw"):
            if self.analog_rate <= 2 * getattr(self, name):
                raise InvalidArgumentError(
                    f"analog_rate must exceed twice {name} (filtering happens there)"
                )

    @property
    def rk4_dt(self) -> float:
        return 1.0 / (self.rk4_substeps_per_awg_sample * self.awg_rate)


@dataclass(frozen=True)
class ChannelConfig:
    laser: LaserParams
    chain: AnalogChainParams


def load_channel_config(path=None) -> ChannelConfig:
    """Read laser + chain parameters from JSON; defaults ship with the package."""
    if path is None:
        text = (
            resources.files("dmle2e")
            .joinpath("configs/channel.default.json")
            .read_text()
        )
        raw = json.loads(text)
    else:
        with open(path) as fh:
            raw = json.load(fh)
    las = raw["laser"]
    ch = raw.get("chain", {})
    laser = LaserParams(
        active_volume=las["active_volume_cm3"],
        confinement=las["confinement"],
        gain_coeff=las["gain_coeff_cm3_s"],
        transparency_density=las["transparency_density_cm3"],
        gain_compression=las["gain_compression_cm3"],
        carrier_lifetime=las["carrier_lifetime_s"],
        photon_lifetime=las["photon_lifetime_s"],
        spont_fraction=las["spont_fraction"],
        external_efficiency=las["external_efficiency_w_per_a"],
        electron_charge=las.get("electron_charge_c", 1.602176634e-19),
    )
    chain = AnalogChainParams(
        awg_rate=ch.get("awg_rate_hz", 65e9),
        awg_bw=ch.get("awg_bw_hz", 25e9),
        awg_filter_taps=ch.get("awg_filter_taps", 9),
        amp_gain_db=ch.get("amp_gain_db", 13.0),
        amp_bw=ch.get("amp_bw_hz", 38e9),
        amp_filter_taps=ch.get("amp_filter_taps", 21),
        pd_bw=ch.get("pd_bw_hz", 50e9),
        pd_filter_taps=ch.get("pd_filter_taps", 21),
        dso_bw=ch.get("dso_bw_hz", 33e9),
        dso_filter_taps=ch.get("dso_filter_taps", 31),
        dso_rate=ch.get("dso_rate_hz", 80e9),
        analog_rate=ch.get("analog_rate_hz", 130e9),
        load_ohms=ch.get("load_ohms", 50.0),
        mod_transconductance=ch.get("mod_transconductance_a_per_v", 0.012),
        noise_sigma=ch.get("noise_sigma", 0.3),
        rk4_substeps_per_awg_sample=ch.get("rk4_substeps_per_awg_sample", 8),
    )
    return ChannelConfig(laser=laser, chain=chain)


# ---------------------------------------------------------------------------
# electrical conversions
# ---------------------------------------------------------------------------


def dbm_to_peak_voltage(p_rf_dbm: float, load_ohms: float) -> float:
    """Peak voltage of a sine dissipating p_rf_dbm into the load."""
    if not load_ohms > 0:
        raise InvalidArgumentError("load_ohms must be positive")
    p_watts = 10.0 ** (p_rf_dbm / 10.0) * 1e-3
    return math.sqrt(2.0 * p_watts * load_ohms)


# ---------------------------------------------------------------------------
# laser physics
# ---------------------------------------------------------------------------


def _rates(n, s, i_amps, p: LaserParams):
    qv = p.electron_charge * p.active_volume
    comp = 1.0 + p.gain_compression * s
    stim = p.gain_coeff * (n - p.transparency_density) * s / comp
    dn = i_amps / qv - n / p.carrier_lifetime - stim
    ds = (
        p.confinement * stim
        - s / p.photon_lifetime
        + p.confinement * p.spont_fraction * n / p.carrier_lifetime
    )
    return dn, ds


def photon_density_to_mw(s, p: LaserParams):
    """Slope-efficiency power convention (see module docstring)."""
    return (
        p.external_efficiency
        * p.electron_charge
        * p.active_volume
        * s
        / (p.confinement * p.photon_lifetime)
        * 1e3
    )


def steady_state(i_bias_ma: float, p: LaserParams) -> tuple[float, float, float]:
    """Damped-Newton solve of dN/dt = dS/dt = 0.

    Returns (carrier_density, photon_density, power_mw). Residuals are
    driven below 1e-10 relative to the pump/decay rate scale.
    """
    if i_bias_ma < 0:
        raise InvalidArgumentError("i_bias must be >= 0")
    i_amps = i_bias_ma * 1e-3
    if i_amps == 0.0:
        return 0.0, 0.0, 0.0
    qv = p.electron_charge * p.active_volume

    def n_of_s(s):
        # carrier density satisfying the photon equation for a given S
        comp = 1.0 + p.gain_compression * s
        num = s / p.photon_lifetime
        den = (
            p.confinement * p.gain_coeff * s / comp
            + p.confinement * p.spont_fraction / p.carrier_lifetime
        )
        num += p.confinement * p.gain_coeff * p.transparency_density * s / comp
        return num / den

    def carrier_residual(s):
        n = n_of_s(s)
        return _rates(n, s, i_amps, p)[0]

    # bracket the S fixed point, then bisect as a seed for Newton
    s_lo, s_hi = 1e-6, 2.0 * p.confinement * p.photon_lifetime * i_amps / qv + 1e3
    while carrier_residual(s_hi) > 0:
        s_hi *= 4.0
        if s_hi > 1e25:
            raise NumericError("failed to bracket the photon steady state")
    for _ in range(80):
        mid = math.sqrt(s_lo * s_hi)
        if carrier_residual(mid) > 0:
            s_lo = mid
        else:
            s_hi = mid
    s = math.sqrt(s_lo * s_hi)
    n = n_of_s(s)

    rate_scale = max(i_amps / qv, n / p.carrier_lifetime)
    res = math.inf
    for _ in range(200):
        dn, ds = _rates(n, s, i_amps, p)
        res = math.hypot(dn / rate_scale, ds / rate_scale)
        if res < 1e-10:
            return n, s, photon_density_to_mw(s, p)
        comp = 1.0 + p.gain_compression * s
        gterm = p.gain_coeff * (n - p.transparency_density)
        j00 = -1.0 / p.carrier_lifetime - p.gain_coeff * s / comp
        j01 = -gterm / comp**2
        j10 = p.confinement * p.gain_coeff * s / comp + (
            p.confinement * p.spont_fraction / p.carrier_lifetime
        )
        j11 = p.confinement * gterm / comp**2 - 1.0 / p.photon_lifetime
        det = j00 * j11 - j01 * j10
        if det == 0.0:
            raise NumericError("singular Jacobian in steady-state solve")
        step_n = -(j11 * dn - j01 * ds) / det
        step_s = -(-j10 * dn + j00 * ds) / det
        alpha = 1.0
        for _ in range(60):
            n_new = n + alpha * step_n
            s_new = s + alpha * step_s
            if n_new >= 0 and s_new >= 0:
                dn2, ds2 = _rates(n_new, s_new, i_amps, p)
                if math.hypot(dn2 / rate_scale, ds2 / rate_scale) < res:
                    break
            alpha *= 0.5
        n = max(n + alpha * step_n, 0.0)
        s = max(s + alpha * step_s, 0.0)
    raise NumericError(
        f"steady-state Newton failed to converge at {i_bias_ma} mA "
        f"(residual {res:.3e})"
    )


def small_signal_resonance(i_bias_ma: float, p: LaserParams):
    """Linearization of the implemented equations at the operating point.

    Returns (f_natural_hz, f_damped_hz, damping_rate) from the Jacobian
    eigenvalues; (0, 0, rate) when the response is overdamped.
    """
    n, s, _ = steady_state(i_bias_ma, p)
    comp = 1.0 + p.gain_compression * s
    gterm = p.gain_coeff * (n - p.transparency_density)
    j00 = -1.0 / p.carrier_lifetime - p.gain_coeff * s / comp
    j01 = -gterm / comp**2
    j10 = p.confinement * p.gain_coeff * s / comp + (
        p.confinement * p.spont_fraction / p.carrier_lifetime
    )
    j11 = p.confinement * gterm / comp**2 - 1.0 / p.photon_lifetime
    eig = np.linalg.eigvals(np.array([[j00, j01], [j10, j11]]))
    damping = -float(np.max(eig.real))
    imag = float(np.abs(eig.imag).max())
    if imag == 0.0:
        return 0.0, 0.0, damping
    f_nat = float(np.abs(eig[0])) / (2.0 * math.pi)
    return f_nat, imag / (2.0 * math.pi), damping


@njit(cache=True)
def _rk4_kernel(
    drive_amps, n_sub, dt, qv, tau_n, tau_p, g0, n_tr, eps, gamma, beta, n0, s0
):
    n_samp = drive_amps.shape[0]
    out = np.empty(n_samp)
    n = n0
    s = s0
    out[0] = s0
    n_floor = -1e-12 * n0
    s_floor = -1e-12 * max(s0, 1.0)
    for i in range(n_samp - 1):
        i0 = drive_amps[i]
        di = drive_amps[i + 1] - i0
        for j in range(n_sub):
            ia = i0 + di * (j / n_sub)
            im = i0 + di * ((j + 0.5) / n_sub)
            ib = i0 + di * ((j + 1.0) / n_sub)

            comp = 1.0 + eps * s
            stim = g0 * (n - n_tr) * s / comp
            k1n = ia / qv - n / tau_n - stim
            k1s = gamma * stim - s / tau_p + gamma * beta * n / tau_n

            n2 = n + 0.5 * dt * k1n
            s2 = s + 0.5 * dt * k1s
            comp = 1.0 + eps * s2
            stim = g0 * (n2 - n_tr) * s2 / comp
            k2n = im / qv - n2 / tau_n - stim
            k2s = gamma * stim - s2 / tau_p + gamma * beta * n2 / tau_n

            n3 = n + 0.5 * dt * k2n
            s3 = s + 0.5 * dt * k2s
            comp = 1.0 + eps * s3
            stim = g0 * (n3 - n_tr) * s3 / comp
            k3n = im / qv - n3 / tau_n - stim
            k3s = gamma * stim - s3 / tau_p + gamma * beta * n3 / tau_n

            n4 = n + dt * k3n
            s4 = s + dt * k3s
            comp = 1.0 + eps * s4
            stim = g0 * (n4 - n_tr) * s4 / comp
            k4n = ib / qv - n4 / tau_n - stim
            k4s = gamma * stim - s4 / tau_p + gamma * beta * n4 / tau_n

            n = n + dt * (k1n + 2.0 * k2n + 2.0 * k3n + k4n) / 6.0
            s = s + dt * (k1s + 2.0 * k2s + 2.0 * k3s + k4s) / 6.0
            if n < n_floor or s < s_floor:
                return out[: i + 1]
        out[i + 1] = s
    return out


def dml_simulate(drive: Waveform, p: LaserParams, dt: float) -> Waveform:
    """Fixed-step RK4 integration of the rate equations.

    ``drive`` is current in mA; drive values are linearly interpolated
    between samples; the initial condition is the steady state at the first
    drive value. Output is optical power in mW at the drive's sample rate.
    """
    if not dt > 0:
        raise InvalidArgumentError("dt must be positive")
    f_nat, _, _ = small_signal_resonance(float(np.mean(drive.samples)), p)
    if f_nat > 0 and dt > 1.0 / (20.0 * f_nat):
        raise InvalidArgumentError(
            f"dt={dt:.3e} too coarse for relaxation resonance {f_nat:.3e} Hz; "
            f"need dt <= {1.0 / (20.0 * f_nat):.3e}"
        )
    sample_dt = 1.0 / drive.sample_rate
    n_sub = max(1, math.ceil(sample_dt / dt))
    dt_eff = sample_dt / n_sub

    n0, s0, _ = steady_state(float(drive.samples[0]), p)
    s_traj = _rk4_kernel(
        np.ascontiguousarray(drive.samples * 1e-3),
        n_sub,
        dt_eff,
        p.electron_charge * p.active_volume,
        p.carrier_lifetime,
        p.photon_lifetime,
        p.gain_coeff,
        p.transparency_density,
        p.gain_compression,
        p.confinement,
        p.spont_fraction,
        n0,
        s0,
    )
    if s_traj.shape[0] != len(drive):
        raise NumericError(
            "rate-equation integration went negative (numeric instability); "
            "reduce the RK4 step dt"
        )
    return Waveform(photon_density_to_mw(s_traj, p), drive.sample_rate)


# ---------------------------------------------------------------------------
# analog chain
# ---------------------------------------------------------------------------


def awg_tx_filter(chain: AnalogChainParams, symbol_rate: float) -> np.ndarray:
    """AWG-matching low-pass for the 2 SpS transmit DSP domain.

    The physical AWG cutoff can exceed the 2 SpS Nyquist at low symbol
    rates; the design cutoff is capped at 0.42 of the DSP rate so
    zero-stuffing images near Nyquist (which the physical AWG cannot
    reproduce anyway) are suppressed before conversion.
    """
    rate = 2.0 * symbol_rate
    cutoff = min(chain.awg_bw, 0.42 * rate)
    return design_supergaussian(chain.awg_filter_taps, 2, cutoff, rate).taps


@lru_cache(maxsize=8)
def _chain_filters(chain: AnalogChainParams):
    awg = design_supergaussian(
        chain.awg_filter_taps, 2, chain.awg_bw, chain.awg_rate
    )
    amp = design_supergaussian(
        chain.amp_filter_taps, 2, chain.amp_bw, chain.analog_rate
    )
    pd = design_supergaussian(
        chain.pd_filter_taps, 2, chain.pd_bw, chain.analog_rate
    )
    # scope response approximated as a linear-phase FIR matching the
    # magnitude of a 4th-order Bessel low-pass at its -3 dB bandwidth
    b, a = _sps.bessel(4, 2.0 * math.pi * chain.dso_bw, analog=True, norm="mag")

    def bessel_mag(freqs):
        _, h = _sps.freqs(b, a, worN=2.0 * math.pi * np.maximum(freqs, 0.0))
        return np.abs(h)

    dso_taps = design_linear_phase_fir(
        bessel_mag, chain.dso_filter_taps, chain.analog_rate
    )
    dso = FirFilter(dso_taps, design="raw")
    return awg, amp, pd, dso


def _propagate(
    digital: Waveform,
    i_bias_ma: float,
    p_rf_dbm: float,
    n_copies: int,
    seed: int,
    cfg: ChannelConfig,
    keep_dso_rate: bool = False,
):
    chain = cfg.chain
    if n_copies < 1:
        raise InvalidArgumentError("n_copies must be >= 1")
    if not 50.0 <= i_bias_ma <= 100.0:
        warnings.warn(f"i_bias {i_bias_ma} mA outside the calibrated [50,100] range")
    if not -4.0 <= p_rf_dbm <= 2.0:
        warnings.warn(f"p_rf {p_rf_dbm} dBm outside the calibrated [-4,2] range")
    awg_f, amp_f, pd_f, dso_f = _chain_filters(chain)

    # digital-to-analog: AWG rate, AWG bandwidth
    x = resample(digital, chain.awg_rate)
    x = fir_apply(x, awg_f)

    # drive scaling: unit RMS, then the peak voltage of a sine at p_rf_dbm
    ac = x.samples - x.samples.mean()
    rms = float(np.sqrt(np.mean(ac**2)))
    if rms == 0.0:
        volts = np.zeros_like(ac)
    else:
        volts = ac / rms * dbm_to_peak_voltage(p_rf_dbm, chain.load_ohms)
    v = resample(Waveform(volts, chain.awg_rate), chain.analog_rate)

    # RF amplifier: linear gain + bandwidth
    v = Waveform(v.samples * 10.0 ** (chain.amp_gain_db / 20.0), v.sample_rate)
    v = fir_apply(v, amp_f)

    # volts -> laser drive current (bias tee); diode conducts forward only
    drive_ma = v.samples * chain.mod_transconductance * 1e3 + i_bias_ma
    drive_ma = np.maximum(drive_ma, 0.0)
    power = dml_simulate(Waveform(drive_ma, v.sample_rate), cfg.laser, chain.rk4_dt)

    # photodetector (unity responsivity) and scope front end
    rx = fir_apply(power, pd_f)
    rx = fir_apply(rx, dso_f)

    copies_2sps = []
    copies_dso = []
    for k in range(n_copies):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, k)))
        noisy = rx.samples + rng.normal(0.0, chain.noise_sigma, size=rx.samples.size)
        cap = resample(Waveform(noisy, rx.sample_rate), chain.dso_rate)
        if keep_dso_rate:
            copies_dso.append(cap)
        copies_2sps.append(resample(cap, digital.sample_rate))
    return copies_2sps, copies_dso


def testbed_propagate(
    digital: Waveform,
    i_bias_ma: float,
    p_rf_dbm: float,
    n_copies: int,
    seed: int,
    cfg: ChannelConfig,
) -> list[Waveform]:
    """Full link: AWG -> amplifier -> laser -> PD -> DSO capture at 2 SpS.

    ``digital`` is the 2 SpS transmit sequence (zero-mean, unit-peak by
    convention; it is re-normalized to unit RMS internally before the
    p_rf_dbm scaling). Returns ``n_copies`` captures differing only in
    scope noise, deterministic per (seed, copy_index).
    """
    copies, _ = _propagate(digital, i_bias_ma, p_rf_dbm, n_copies, seed, cfg)
    return copies


def testbed_propagate_full(
    digital: Waveform,
    i_bias_ma: float,
    p_rf_dbm: float,
    n_copies: int,
    seed: int,
    cfg: ChannelConfig,
) -> tuple[list[Waveform], list[Waveform]]:
    """Like testbed_propagate, but also returns the dso_rate captures
    (used for eye diagrams)."""
    return _propagate(
        digital, i_bias_ma, p_rf_dbm, n_copies, seed, cfg, keep_dso_rate=True
    )
