"""Sample-domain primitives shared by every stage of the link simulation.

Conventions used throughout:

* waveforms are real-valued (intensity modulation / direct detection),
  uniformly sampled, float64;
* FIR filtering is "same"-mode linear convolution, so symmetric filters
  introduce no group delay and output length equals input length;
* edge transients (first/last ``max(filter span, 32)`` samples) are not
  covered by numeric guarantees and are excluded from metric windows.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import signal as _sps

from .errors import (
    DegenerateInputError,
    FormatError,
    InvalidArgumentError,
    OutOfRangeError,
)

_WAVE_MAGIC = b"WAVE0001"


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be one-dimensional")
    if arr.size < 1:
        raise InvalidArgumentError(f"{name} must have at least one element")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(eq=False)
class Waveform:
    """Uniformly sampled real signal plus its sample rate in Hz."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = _as_float_array(self.samples, "samples")
        self.sample_rate = float(self.sample_rate)
        if not (self.sample_rate > 0 and math.isfinite(self.sample_rate)):
            raise InvalidArgumentError("sample_rate must be positive and finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(eq=False)
class FirFilter:
    """Real FIR tap vector with design metadata.

    ``design`` is one of ``rrc`` (root raised cosine, ``rolloff`` holds the
    roll-off factor), ``supergaussian`` (``cutoff_hz`` holds the prototype
    cutoff) or ``raw``.
    """

    taps: np.ndarray
    design: str = "raw"
    rolloff: Optional[float] = None
    cutoff_hz: Optional[float] = None

    def __post_init__(self):
        self.taps = _as_float_array(self.taps, "taps")
        if self.design not in ("rrc", "supergaussian", "raw"):
            raise InvalidArgumentError(f"unknown filter design tag {self.design!r}")
        if self.design == "rrc":
            n = self.taps.size
            if not np.array_equal(self.taps, self.taps[::-1]):
                raise InvalidArgumentError("rrc taps must be exactly symmetric")
            energy = float(np.sum(self.taps**2))
            if abs(energy - 1.0) > 1e-12:
                raise InvalidArgumentError(
                    f"rrc taps must have unit energy, got {energy!r}"
                )

    def __len__(self) -> int:
        return self.taps.size


@dataclass(eq=False)
class SymbolFrame:
    """Sequence of 4PAM symbol indices at a given symbol rate (baud)."""

    indices: np.ndarray
    symbol_rate: float

    def __post_init__(self):
        arr = np.ascontiguousarray(self.indices, dtype=np.int64)
        if arr.ndim != 1:
            raise InvalidArgumentError("indices must be one-dimensional")
        if arr.size and (arr.min() < 0 or arr.max() > 3):
            raise InvalidArgumentError("symbol indices must lie in {0,1,2,3}")
        arr.flags.writeable = False
        self.indices = arr
        self.symbol_rate = float(self.symbol_rate)
        if not self.symbol_rate > 0:
            raise InvalidArgumentError("symbol_rate must be positive")

    def __len__(self) -> int:
        return self.indices.size


@dataclass(eq=False)
class Spectrum:
    """One-sided power spectral density estimate."""

    freqs: np.ndarray
    psd: np.ndarray
    resolution_bw: float

    def __post_init__(self):
        self.freqs = _as_float_array(self.freqs, "freqs")
        psd = np.ascontiguousarray(self.psd, dtype=np.float64)
        if psd.shape != self.freqs.shape:
            raise InvalidArgumentError("freqs and psd must have equal shape")
        if np.any(np.diff(self.freqs) <= 0):
            raise InvalidArgumentError("freqs must be strictly increasing")
        if np.any(psd < 0):
            raise InvalidArgumentError("psd must be nonnegative in linear units")
        psd.flags.writeable = False
        self.psd = psd
        self.resolution_bw = float(self.resolution_bw)


# ---------------------------------------------------------------------------
# Filter design
# ---------------------------------------------------------------------------


def design_rrc(n_taps: int, rolloff: float, sps: int) -> FirFilter:
    """Root-raised-cosine taps sampled at ``sps`` samples per symbol.

    Taps are exactly symmetric (computed on |t| and mirrored) and normalized
    to unit energy. The removable singularities at t=0 and |t|=T/(4*rolloff)
    are evaluated by their analytic limits.
    """
    if n_taps < 3 or n_taps % 2 == 0:
        raise InvalidArgumentError("n_taps must be odd and >= 3")
    if not 0.0 <= rolloff <= 1.0:
        raise InvalidArgumentError("rolloff must lie in [0, 1]")
    if sps < 1:
        raise InvalidArgumentError("sps must be >= 1")

    half = (n_taps - 1) // 2
    # time in symbol periods, nonnegative half only
    t = np.arange(half + 1, dtype=np.float64) / float(sps)
    a = float(rolloff)
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if ti == 0.0:
            h[i] = 1.0 - a + 4.0 * a / math.pi
        elif a > 0.0 and abs(ti - 1.0 / (4.0 * a)) < 1e-12:
            h[i] = (a / math.sqrt(2.0)) * (
                (1.0 + 2.0 / math.pi) * math.sin(math.pi / (4.0 * a))
                + (1.0 - 2.0 / math.pi) * math.cos(math.pi / (4.0 * a))
            )
        else:
            num = math.sin(math.pi * ti * (1.0 - a)) + 4.0 * a * ti * math.cos(
                math.pi * ti * (1.0 + a)
            )
            den = math.pi * ti * (1.0 - (4.0 * a * ti) ** 2)
            h[i] = num / den
    taps = np.concatenate([h[:0:-1], h])
    taps = taps / math.sqrt(float(np.sum(taps**2)))
    return FirFilter(taps, design="rrc", rolloff=a)


def design_linear_phase_fir(
    mag_fn: Callable[[np.ndarray], np.ndarray],
    n_taps: int,
    rate_hz: float,
    grid: int = 4096,
) -> np.ndarray:
    """Linear-phase FIR taps matching a target magnitude response.

    Frequency-samples ``mag_fn`` (defined for f >= 0, in Hz) on a dense grid,
    inverse-transforms, centers and symmetrically truncates to ``n_taps``.
    The result is symmetrized and renormalized to DC gain exactly 1.
    """
    if n_taps < 1 or n_taps % 2 == 0:
        raise InvalidArgumentError("n_taps must be odd and >= 1")
    if grid < 4 * n_taps:
        grid = 4 * n_taps
    freqs = np.fft.rfftfreq(grid, d=1.0 / rate_hz)
    mag = np.asarray(mag_fn(freqs), dtype=np.float64)
    h = np.fft.irfft(mag, grid)
    h = np.roll(h, grid // 2)
    c = grid // 2
    half = (n_taps - 1) // 2
    taps = h[c - half : c + half + 1].copy()
    taps = 0.5 * (taps + taps[::-1])  # enforce exact symmetry
    taps /= taps.sum()
    return taps


def design_supergaussian(
    n_taps: int, order: int, cutoff_hz: float, rate_hz: float
) -> FirFilter:
    """Super-Gaussian low-pass FIR: |H(f)| = exp(-0.5 (f/cutoff)^(2*order)).

    The prototype crosses e^(-1/2) (~0.6065) at ``cutoff_hz``. DC gain is
    renormalized to exactly 1 after truncation.
    """
    if n_taps % 2 == 0:
        raise InvalidArgumentError("n_taps must be odd")
    if order < 1:
        raise InvalidArgumentError("order must be >= 1")
    if not 0.0 < cutoff_hz < rate_hz / 2.0:
        raise InvalidArgumentError("cutoff_hz must lie in (0, rate_hz/2)")

    def mag(f):
        return np.exp(-0.5 * (f / cutoff_hz) ** (2 * order))

    taps = design_linear_phase_fir(mag, n_taps, rate_hz)
    return FirFilter(taps, design="supergaussian", cutoff_hz=float(cutoff_hz))


# ---------------------------------------------------------------------------
# Core sample operations
# ---------------------------------------------------------------------------


def fir_apply(w: Waveform, f: FirFilter) -> Waveform:
    """"Same"-mode convolution; symmetric filters add no group delay."""
    y = np.convolve(w.samples, f.taps, mode="same")
    return Waveform(y, w.sample_rate)


def upsample_insert(values: Sequence[float], sps: int) -> np.ndarray:
    """Zero-stuff to ``sps`` samples per input value (originals at k*sps)."""
    if sps < 1:
        raise InvalidArgumentError("sps must be >= 1")
    vals = np.asarray(values, dtype=np.float64)
    out = np.zeros(vals.size * sps, dtype=np.float64)
    out[::sps] = vals
    return out


def resample(w: Waveform, new_rate_hz: float, max_denominator: int = 256) -> Waveform:
    """Band-limited rational (polyphase) resampling.

    The rate ratio must be representable as a fraction with denominator not
    exceeding ``max_denominator`` (relative error < 1e-9).
    """
    if not new_rate_hz > 0:
        raise InvalidArgumentError("new_rate_hz must be positive")
    if new_rate_hz == w.sample_rate:
        return Waveform(w.samples, w.sample_rate)
    ratio = new_rate_hz / w.sample_rate
    frac = Fraction(ratio).limit_denominator(max_denominator)
    if frac.numerator <= 0 or abs(float(frac) - ratio) > 1e-9 * ratio:
        raise InvalidArgumentError(
            f"rate ratio {ratio!r} is not representable with denominator "
            f"<= {max_denominator}"
        )
    up, down = frac.numerator, frac.denominator
    # longer-than-default polyphase filter: passband flat to ~80% Nyquist
    max_ud = max(up, down)
    h = _sps.firwin(2 * 24 * max_ud + 1, 1.0 / max_ud, window=("kaiser", 9.0))
    y = _sps.resample_poly(w.samples, up, down, window=h)
    return Waveform(y, w.sample_rate * float(frac))


def synchronize(reference: Waveform, measured: Waveform) -> int:
    """Integer lag maximizing normalized cross-correlation.

    ``measured[lag + i]`` aligns with ``reference[i]``; a pure delay of k
    samples returns k. Both signals are mean-removed before correlating and
    lags are restricted to overlaps of at least half the reference.
    """
    if measured.sample_rate != reference.sample_rate:
        raise InvalidArgumentError("sample rates must match")
    n_ref = len(reference)
    n_meas = len(measured)
    if n_meas < n_ref:
        raise InvalidArgumentError("measured must be at least as long as reference")
    r = reference.samples - reference.samples.mean()
    m = measured.samples - measured.samples.mean()
    r_norm = float(np.sqrt(np.sum(r**2)))
    if r_norm == 0.0 or not np.any(m):
        raise DegenerateInputError("cannot synchronize constant or all-zero input")

    # corr[j] = sum_i m[i] * r[i - (n_ref - 1) + j]  -> lag = j - (n_ref - 1)
    corr = _sps.correlate(m, r, mode="full")
    lags = np.arange(-(n_ref - 1), n_meas)
    # sliding energy of the measured window actually overlapping the reference
    csum = np.concatenate([[0.0], np.cumsum(m**2)])

    def window_energy(lag: int) -> float:
        lo = max(lag, 0)
        hi = min(lag + n_ref, n_meas)
        return csum[hi] - csum[lo]

    min_overlap = max(n_ref // 2, 1)
    best_lag, best_rho = None, -np.inf
    for j, lag in enumerate(lags):
        overlap = min(lag + n_ref, n_meas) - max(lag, 0)
        if overlap < min_overlap:
            continue
        energy = window_energy(int(lag))
        if energy <= 0.0:
            continue
        rho = corr[j] / (math.sqrt(energy) * r_norm)
        if rho > best_rho:
            best_rho, best_lag = rho, int(lag)
    if best_lag is None:
        raise DegenerateInputError("no lag with sufficient overlap")
    return best_lag


def align(reference: Waveform, measured: Waveform) -> tuple[Waveform, Waveform, int]:
    """Synchronize and trim both signals to their common aligned span."""
    lag = synchronize(reference, measured)
    n_ref = len(reference)
    n_meas = len(measured)
    lo_ref = max(0, -lag)
    hi_ref = min(n_ref, n_meas - lag)
    ref = reference.samples[lo_ref:hi_ref]
    meas = measured.samples[lo_ref + lag : hi_ref + lag]
    return (
        Waveform(ref, reference.sample_rate),
        Waveform(meas, measured.sample_rate),
        lag,
    )


def average_copies(copies: Sequence[Waveform]) -> Waveform:
    """Element-wise mean of equal-length, equal-rate captures."""
    if len(copies) < 2:
        raise InvalidArgumentError("need at least 2 copies")
    n = len(copies[0])
    rate = copies[0].sample_rate
    for c in copies[1:]:
        if len(c) != n or c.sample_rate != rate:
            raise InvalidArgumentError("copies must share length and sample rate")
    stacked = np.stack([c.samples for c in copies])
    return Waveform(stacked.mean(axis=0), rate)


def normalize01(w: Waveform) -> tuple[Waveform, float, float]:
    """Map min -> 0 and max -> 1; returns (waveform, scale, offset).

    The original is recovered exactly as ``normalized * scale + offset``.
    """
    lo = float(w.samples.min())
    hi = float(w.samples.max())
    if hi <= lo:
        raise DegenerateInputError("constant waveform cannot be normalized to [0,1]")
    scale = hi - lo
    out = (w.samples - lo) / scale
    return Waveform(out, w.sample_rate), scale, lo


def estimate_snr(copies: Sequence[Waveform]) -> float:
    """SNR (dB) of repeated captures of the same deterministic signal.

    Signal power is the time-variance of the per-time mean across copies;
    noise power is the time-average of the unbiased per-time variance across
    copies. Returns +inf when the noise power is exactly zero.
    """
    if len(copies) < 2:
        raise InvalidArgumentError("need at least 2 copies")
    n = len(copies[0])
    for c in copies[1:]:
        if len(c) != n:
            raise InvalidArgumentError("copies must have equal lengths")
    stacked = np.stack([c.samples for c in copies])
    mean_t = stacked.mean(axis=0)
    signal_power = float(np.var(mean_t))
    noise_power = float(np.mean(np.var(stacked, axis=0, ddof=1)))
    if noise_power == 0.0:
        return math.inf
    return 10.0 * math.log10(signal_power / noise_power)


def psd(w: Waveform, segment_len: int, overlap: float = 0.5) -> Spectrum:
    """Welch-averaged one-sided PSD with a Hann window.

    ``resolution_bw`` is the Hann equivalent noise bandwidth. Total power is
    preserved (no detrending), so integrating the PSD recovers the
    time-domain mean power to within windowing bias.
    """
    if segment_len > len(w):
        raise InvalidArgumentError("segment_len exceeds signal length")
    if not 0.0 <= overlap < 1.0:
        raise InvalidArgumentError("overlap must lie in [0, 1)")
    freqs, pxx = _sps.welch(
        w.samples,
        fs=w.sample_rate,
        window="hann",
        nperseg=segment_len,
        noverlap=int(segment_len * overlap),
        detrend=False,
        scaling="density",
    )
    # numerical floor can dip infinitesimally below zero
    pxx = np.maximum(pxx, 0.0)
    enbw = 1.5 * w.sample_rate / segment_len
    return Spectrum(freqs, pxx, enbw)


def bw_at_level(s: Spectrum, level_db: float) -> float:
    """Highest frequency where the PSD first stays below peak - |level_db|.

    Interpolates linearly in dB between bins. Raises if the spectrum never
    falls below the level within its frequency span.
    """
    psd_lin = np.maximum(s.psd, 1e-300)
    psd_db = 10.0 * np.log10(psd_lin)
    peak_db = float(psd_db.max())
    thr = peak_db - abs(level_db)
    above = psd_db >= thr
    if not above.any():
        raise OutOfRangeError("spectrum has no bin at or above the level")
    i_last = int(np.nonzero(above)[0][-1])
    if i_last == psd_db.size - 1:
        raise OutOfRangeError("spectrum never falls below the requested level")
    f0, f1 = s.freqs[i_last], s.freqs[i_last + 1]
    p0, p1 = psd_db[i_last], psd_db[i_last + 1]
    return float(f0 + (f1 - f0) * (p0 - thr) / (p0 - p1))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_csv(w: Waveform, path) -> None:
    """Columnar text format: a sample-rate comment line, then index,value."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# sample_rate_hz={w.sample_rate!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["index", "value"])
        for i, v in enumerate(w.samples):
            writer.writerow([i, repr(float(v))])


def read_csv(path, sample_rate: Optional[float] = None) -> Waveform:
    with open(path, "r", newline="") as fh:
        first = fh.readline()
        if first.startswith("# sample_rate_hz="):
            rate = float(first.split("=", 1)[1])
            header = fh.readline()
        else:
            if sample_rate is None:
                raise FormatError("CSV lacks a sample-rate line; pass sample_rate")
            rate = float(sample_rate)
            header = first
        if header.strip() != "index,value":
            raise FormatError(f"unexpected CSV header {header.strip()!r}")
        values = [float(row[1]) for row in csv.reader(fh) if row]
    return Waveform(values, rate)


def write_binary(w: Waveform, path) -> None:
    """Raw little-endian float64 with an 8-byte magic + 8-byte rate header."""
    with open(path, "wb") as fh:
        fh.write(_WAVE_MAGIC)
        fh.write(struct.pack("<d", w.sample_rate))
        fh.write(w.samples.astype("<f8").tobytes())


def read_binary(path) -> Waveform:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _WAVE_MAGIC:
            raise FormatError(f"bad waveform magic {magic!r}")
        rate_bytes = fh.read(8)
        if len(rate_bytes) != 8:
            raise FormatError("truncated waveform header")
        (rate,) = struct.unpack("<d", rate_bytes)
        payload = fh.read()
    if len(payload) % 8 != 0 or len(payload) == 0:
        raise FormatError("truncated waveform payload")
    samples = np.frombuffer(payload, dtype="<f8")
    return Waveform(samples, rate)
