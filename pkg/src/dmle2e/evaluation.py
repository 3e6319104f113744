"""Metrics and experiment protocols: SER with Wilson intervals, RF-power
sweeps at the learned bias, eye-diagram extraction, spectra and -10 dB
bandwidth compression."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import sigproc as sp
from ._container import pack, split_blob, unpack
from .errors import FormatError, InvalidArgumentError

EYE_MAGIC = b"DMLEYE01"

#: symbols dropped from each end of a detected stream before counting errors
TRANSIENT_TRIM_SYMBOLS = 64

_Z95 = 1.959963984540054


def wilson_interval(k: int, n: int, z: float = _Z95) -> tuple[float, float]:
    """Wilson score interval: well-behaved at zero errors and small n."""
    if n == 0:
        return 0.0, 1.0
    phat = k / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, center - half)
    hi = 1.0 if k == n else min(1.0, center + half)
    return lo, hi


def compute_ser(detected: sp.SymbolFrame, truth: sp.SymbolFrame):
    """Error fraction plus Wilson 95% interval.

    Callers are expected to have trimmed transients already (see
    TRANSIENT_TRIM_SYMBOLS); lengths must match exactly.
    """
    if len(detected) != len(truth):
        raise InvalidArgumentError(
            f"length mismatch: detected {len(detected)} vs truth {len(truth)}"
        )
    n = len(truth)
    k = int(np.count_nonzero(detected.indices != truth.indices))
    ser = k / n if n else 0.0
    return ser, wilson_interval(k, n)


# ---------------------------------------------------------------------------
# sweep protocol
# ---------------------------------------------------------------------------

SWEEP_CSV_HEADER = "system,r_s,p_rf_dbm,i_bias_ma,ser,ci_low,ci_high,n"


@dataclass
class SweepRow:
    system: str
    r_s: float
    p_rf_dbm: float
    i_bias_ma: float
    ser: float
    ci_low: float
    ci_high: float
    n_symbols: int


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def sorted_rows(self) -> list[SweepRow]:
        return sorted(self.rows, key=lambda r: (r.system, r.p_rf_dbm))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(SWEEP_CSV_HEADER + "\n")
        for r in self.sorted_rows():
            buf.write(
                f"{r.system},{r.r_s!r},{r.p_rf_dbm!r},{r.i_bias_ma!r},"
                f"{r.ser!r},{r.ci_low!r},{r.ci_high!r},{r.n_symbols}\n"
            )
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "rows": [
                    {
                        "system": r.system,
                        "r_s": r.r_s,
                        "p_rf_dbm": r.p_rf_dbm,
                        "i_bias_ma": r.i_bias_ma,
                        "ser": r.ser,
                        "ci_low": r.ci_low,
                        "ci_high": r.ci_high,
                        "n": r.n_symbols,
                    }
                    for r in self.sorted_rows()
                ]
            },
            sort_keys=True,
        )

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != SWEEP_CSV_HEADER:
            raise FormatError("unexpected sweep CSV header")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            rows.append(
                SweepRow(
                    system=parts[0],
                    r_s=float(parts[1]),
                    p_rf_dbm=float(parts[2]),
                    i_bias_ma=float(parts[3]),
                    ser=float(parts[4]),
                    ci_low=float(parts[5]),
                    ci_high=float(parts[6]),
                    n_symbols=int(parts[7]),
                )
            )
        return cls(rows)


def sweep_prf(
    cfg,
    ae_params,
    surrogate_model,
    symbol_rate: float,
    p_rf_grid,
    n_symbols: int,
    seed: int,
    n_train_symbols: int = 6000,
    keep_waveforms: bool = False,
):
    """FFE and VNLE swept over the RF-power grid at the bias the end-to-end
    system learned; the end-to-end system itself evaluated once at its
    learned operating point. Rows come back sorted by (system, p_rf)."""
    from .autoencoder import test_ae
    from .baselines import run_baseline

    grid = [float(g) for g in p_rf_grid]
    if any(g < -4.0 or g > 2.0 for g in grid):
        raise InvalidArgumentError("p_rf grid must stay within [-4, 2] dBm")
    i_bias = ae_params.i_bias_ma
    result = SweepResult()
    artifacts = {}

    ae_out = test_ae(
        ae_params, surrogate_model, cfg, symbol_rate, n_symbols, seed
    )
    result.rows.append(
        SweepRow(
            system="ae",
            r_s=symbol_rate,
            p_rf_dbm=ae_params.p_rf_dbm,
            i_bias_ma=i_bias,
            ser=ae_out["ser"],
            ci_low=ae_out["ci95"][0],
            ci_high=ae_out["ci95"][1],
            n_symbols=ae_out["n_symbols"],
        )
    )
    if keep_waveforms:
        artifacts["ae"] = ae_out

    for kind in ("ffe", "vnle"):
        for g in grid:
            out = run_baseline(
                kind, cfg, i_bias, g, n_train_symbols, n_symbols,
                seed=seed + int(round((g + 4.0) * 8)),
                symbol_rate=symbol_rate,
            )
            result.rows.append(
                SweepRow(
                    system=kind,
                    r_s=symbol_rate,
                    p_rf_dbm=g,
                    i_bias_ma=i_bias,
                    ser=out["ser"],
                    ci_low=out["ci95"][0],
                    ci_high=out["ci95"][1],
                    n_symbols=out["n_symbols"],
                )
            )
            if keep_waveforms and kind not in artifacts:
                artifacts[kind] = out
    result.rows = result.sorted_rows()
    return (result, artifacts) if keep_waveforms else result


# ---------------------------------------------------------------------------
# eye diagrams
# ---------------------------------------------------------------------------


@dataclass
class EyeData:
    traces: np.ndarray     # (n_traces, samples_per_trace)
    sample_rate: float
    span_symbols: int = 2

    def __post_init__(self):
        self.traces = np.asarray(self.traces, dtype=np.float64)
        if self.traces.ndim != 2:
            raise InvalidArgumentError("traces must be a 2-D matrix")


def eye_data(w: sp.Waveform, sps: int, n_traces: int, offset: int = 0) -> EyeData:
    """Consecutive 2-symbol windows; ``offset`` anchors the phase (use the
    synchronization lag so traces start on symbol boundaries)."""
    span = 2 * sps
    need = offset + n_traces * span
    if len(w) < need:
        raise InvalidArgumentError(
            f"waveform too short for {n_traces} traces of {span} samples"
        )
    seg = w.samples[offset : offset + n_traces * span]
    return EyeData(seg.reshape(n_traces, span), w.sample_rate)


def eye_opening(eye: EyeData) -> float:
    """Vertical opening at the center column for 4-level signaling: the
    three largest gaps in the sorted samples separate the level clusters,
    and the smallest of those three is the limiting opening. Collapses
    toward 0 as noise merges the clusters. Diagnostic only."""
    center = np.sort(eye.traces[:, eye.traces.shape[1] // 2])
    if center.size < 8:
        return 0.0
    gaps = np.sort(np.diff(center))
    return float(gaps[-3])


def save_eye(eye: EyeData, path) -> None:
    header = {
        "version": 1,
        "n_traces": int(eye.traces.shape[0]),
        "samples_per_trace": int(eye.traces.shape[1]),
        "sample_rate": eye.sample_rate,
        "span_symbols": eye.span_symbols,
    }
    with open(path, "wb") as fh:
        fh.write(pack(EYE_MAGIC, header, [eye.traces]))


def load_eye(path) -> EyeData:
    with open(path, "rb") as fh:
        header, flat = unpack(fh.read(), EYE_MAGIC)
    if header.get("version") != 1:
        raise FormatError(f"unsupported eye version {header.get('version')!r}")
    shape = (int(header["n_traces"]), int(header["samples_per_trace"]))
    (traces,) = split_blob(flat, [shape])
    return EyeData(traces, header["sample_rate"], header["span_symbols"])


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------


def spectrum_report(ae_wave: sp.Waveform, rrc_wave: sp.Waveform,
                    level_db: float = 10.0) -> dict:
    """-10 dB bandwidths of both transmit spectra plus the compression
    fraction (positive when the learned waveform is narrower)."""
    if ae_wave.sample_rate != rrc_wave.sample_rate:
        raise InvalidArgumentError("sample rates must match for comparison")
    seg = min(512, len(ae_wave) // 4, len(rrc_wave) // 4)
    if seg < 16:
        raise InvalidArgumentError("waveforms too short for a spectrum report")

    def trimmed_psd(w):
        # 2 SpS waveforms can carry a clock tone at exactly Nyquist
        # (zero-stuffing residue); the tone plus its Hann leakage (+-2 bins)
        # is a sampling-grid artifact, not occupied band, so the top bins
        # are excluded from the bandwidth search
        s = sp.psd(w, seg)
        return sp.Spectrum(s.freqs[:-3], s.psd[:-3], s.resolution_bw)

    s_ae = trimmed_psd(ae_wave)
    s_rrc = trimmed_psd(rrc_wave)
    bw_ae = sp.bw_at_level(s_ae, level_db)
    bw_rrc = sp.bw_at_level(s_rrc, level_db)
    return {
        "bw_ae_hz": bw_ae,
        "bw_rrc_hz": bw_rrc,
        "compression_pct": 100.0 * (bw_rrc - bw_ae) / bw_rrc,
        "level_db": -abs(level_db),
        "sample_rate": ae_wave.sample_rate,
        "freqs_hz": s_ae.freqs.tolist(),
        "psd_ae": s_ae.psd.tolist(),
        "psd_rrc": s_rrc.psd.tolist(),
    }
