"""End-to-end trainable transceiver: constellation, pulse shaping, DPD and
operating point at the transmitter; fractionally-spaced FFE, affine readout
and softmax detection at the receiver.

Training runs entirely through the frozen recurrent channel surrogate on a
gradient tape; testing runs against the rate-equation testbed. The bias
current and RF power are unconstrained scalars squashed into their allowed
ranges with a sigmoid, so any finite parameter maps strictly inside.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import sigproc as sp
from ._container import pack, split_blob, unpack
from .channel import (
    AnalogChainParams,
    ChannelConfig,
    awg_tx_filter,
    testbed_propagate_full,
)
from .errors import (
    DegenerateInputError,
    FormatError,
    InvalidArgumentError,
    NumericError,
)
from .grad import Tape, ops
from .optim import Adam
from .surrogate import (
    BIAS_RANGE_MA,
    PRF_RANGE_DBM,
    SurrogateModel,
    forward_on_tape,
    lstm_forward,
    save_model,
)

AE_MAGIC = b"DMLAEP01"
AE_VERSION = 1

PAM4_LEVELS = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])


def _sigmoid_stable(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def map_operating_point(theta: float, low: float, high: float) -> float:
    """Smooth, strictly monotone map of an unconstrained scalar into
    (low, high); theta = 0 lands mid-range."""
    if not low < high:
        raise InvalidArgumentError("low must be < high")
    return low + (high - low) * _sigmoid_stable(float(theta))


@dataclass
class AeParams:
    """All trainable transceiver parameters plus fixed metadata."""

    gcs_levels: np.ndarray          # (4,)
    ps_taps: np.ndarray             # (2,)
    dpd_taps: np.ndarray            # (5,)
    theta_bias: np.ndarray          # scalar, maps into bias_range_ma
    theta_prf: np.ndarray           # scalar, maps into prf_range_dbm
    rx_ffe_taps: np.ndarray         # (n_ffe,) at 2 SpS
    readout_w: np.ndarray           # (4,)
    readout_b: np.ndarray           # (4,)
    phase: int = 0                  # downsampling phase, fixed after init sweep
    bias_range_ma: tuple[float, float] = BIAS_RANGE_MA
    prf_range_dbm: tuple[float, float] = PRF_RANGE_DBM

    def __post_init__(self):
        for name in ("gcs_levels", "ps_taps", "dpd_taps", "theta_bias",
                     "theta_prf", "rx_ffe_taps", "readout_w", "readout_b"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"AeParams.{name} has non-finite values")
            setattr(self, name, arr)
        if self.gcs_levels.shape != (4,):
            raise InvalidArgumentError("gcs_levels must have 4 entries")
        if self.ps_taps.shape != (2,) or self.dpd_taps.shape != (5,):
            raise InvalidArgumentError("ps_taps must be 2-tap, dpd_taps 5-tap")
        if self.readout_w.shape != (4,) or self.readout_b.shape != (4,):
            raise InvalidArgumentError("readout must map to 4 classes")

    def trainable(self) -> dict[str, np.ndarray]:
        return {
            "gcs_levels": self.gcs_levels,
            "ps_taps": self.ps_taps,
            "dpd_taps": self.dpd_taps,
            "theta_bias": self.theta_bias,
            "theta_prf": self.theta_prf,
            "rx_ffe_taps": self.rx_ffe_taps,
            "readout_w": self.readout_w,
            "readout_b": self.readout_b,
        }

    @property
    def i_bias_ma(self) -> float:
        return map_operating_point(self.theta_bias[0], *self.bias_range_ma)

    @property
    def p_rf_dbm(self) -> float:
        return map_operating_point(self.theta_prf[0], *self.prf_range_dbm)


def init_ae_params(rx_ffe_taps: int = 20) -> AeParams:
    """Neutral start: equispaced levels, identity filters, mid-range
    operating point, delta FFE, readout matching equispaced thresholds.

    Deltas sit at the "same"-convolution anchor index (m-1)//2 so the
    initial filters are exact identities.
    """
    ffe = np.zeros(rx_ffe_taps)
    ffe[(rx_ffe_taps - 1) // 2] = 1.0
    # per-class quadratic score -(y-mu)^2 expanded into affine-in-y logits
    mu = np.array([0.125, 0.375, 0.625, 0.875])
    scale = 16.0
    return AeParams(
        gcs_levels=PAM4_LEVELS.copy(),
        ps_taps=np.array([1.0, 0.0]),
        dpd_taps=np.array([0.0, 0.0, 1.0, 0.0, 0.0]),
        theta_bias=np.zeros(1),
        theta_prf=np.zeros(1),
        rx_ffe_taps=ffe,
        readout_w=2.0 * mu * scale,
        readout_b=-(mu**2) * scale,
    )


# ---------------------------------------------------------------------------
# tape-level building blocks (shared by training and inference)
# ---------------------------------------------------------------------------


def _transmit_on_tape(tape, nodes, symbol_batch: np.ndarray, awg_taps: np.ndarray):
    """(B, S) symbol indices -> zero-mean unit-RMS (B, 2S) drive on tape."""
    B, S = symbol_batch.shape
    onehot = np.zeros((B, S, 4))
    np.put_along_axis(onehot, symbol_batch[..., None], 1.0, axis=-1)
    oh = tape.constant(onehot)
    amp = ops.affine(oh, ops.expand_last(nodes["gcs_levels"]), tape.constant(np.zeros(1)))
    amp = ops.squeeze_last(amp)                      # (B, S) level per symbol
    x = ops.upsample(amp, 2)
    x = ops.conv1d(x, nodes["ps_taps"])
    x = ops.conv1d(x, nodes["dpd_taps"])
    x = ops.conv1d(x, tape.constant(awg_taps))
    x = ops.subtract(x, ops.mean_last(x))            # TX chain is AC-coupled
    rms = ops.sqrt(ops.mean_last(ops.square(x)))
    return ops.divide(x, rms)


def _receive_on_tape(tape, nodes, rx, phase: int):
    """(B, T) received samples -> (B, S, 4) logits on tape."""
    y = ops.conv1d(rx, nodes["rx_ffe_taps"])
    y = ops.downsample(y, 2, phase)
    y = ops.expand_last(y)
    return ops.affine(y, ops.reshape(nodes["readout_w"], (1, 4)), nodes["readout_b"])


def _check_constellation(levels: np.ndarray) -> None:
    if float(np.ptp(levels)) < 1e-9:
        raise DegenerateInputError("constellation collapsed: all levels equal")


# ---------------------------------------------------------------------------
# public inference-path operations
# ---------------------------------------------------------------------------


def ae_transmit(
    p: AeParams, symbols: sp.SymbolFrame, chain: AnalogChainParams
) -> tuple[sp.Waveform, float, float]:
    """Transmit DSP chain: GCS lookup, 2x upsampling, pulse shaping, DPD,
    AWG-matching low-pass, zero-mean unit-RMS normalization.

    Returns (2 SpS waveform, mapped i_bias_ma, mapped p_rf_dbm).
    """
    _check_constellation(p.gcs_levels)
    tape = Tape()
    nodes = {k: tape.constant(v) for k, v in p.trainable().items()}
    awg = awg_tx_filter(chain, symbols.symbol_rate)
    drive = _transmit_on_tape(tape, nodes, symbols.indices[None, :], awg)
    wave = sp.Waveform(drive.value[0], 2.0 * symbols.symbol_rate)
    return wave, p.i_bias_ma, p.p_rf_dbm


def ae_receive(p: AeParams, rx: sp.Waveform, sync_lag: int = 0) -> np.ndarray:
    """Receive DSP: 2-SpS FFE, symbol-rate downsampling at the sync phase,
    per-class affine readout. Returns (n_symbols, 4) logits; softmax is
    applied only inside losses / detection."""
    samples = rx.samples[sync_lag:] if sync_lag > 0 else rx.samples
    tape = Tape()
    nodes = {k: tape.constant(v) for k, v in p.trainable().items()}
    logits = _receive_on_tape(tape, nodes, tape.constant(samples[None, :]), p.phase)
    return logits.value[0]


def detect(logits: np.ndarray) -> np.ndarray:
    """Hard decisions: argmax over classes (softmax is monotone)."""
    return np.argmax(logits, axis=-1)


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------


def ae_loss(
    params: dict[str, np.ndarray],
    symbol_batch: np.ndarray,
    model: SurrogateModel,
    snr_db: float,
    rng: np.random.Generator,
    awg_taps: np.ndarray,
    phase: int = 0,
    edge_symbols: int = 16,
    tape: Tape | None = None,
    fixed_noise: np.ndarray | None = None,
):
    """Cross-entropy of the full TX -> surrogate -> noise -> RX chain.

    Returns (loss node, tape, logits node). Noise is sampled up front at a
    level set by ``snr_db`` relative to the surrogate output's AC power and
    enters as a constant, so gradients flow through the clean path (the
    gradient is exact for the realized noise; pass ``fixed_noise`` to pin
    the realization, e.g. for finite-difference validation).
    ``params`` may hold arrays (registered on a fresh tape) or nodes
    already living on ``tape``.
    """
    from .grad.engine import Node

    tape = tape or Tape()
    if all(isinstance(v, Node) for v in params.values()):
        nodes = dict(params)
    else:
        nodes = {k: tape.param(k, v) for k, v in params.items()}
    _check_constellation(np.asarray(nodes["gcs_levels"].value))
    B, S = symbol_batch.shape

    drive = _transmit_on_tape(tape, nodes, symbol_batch, awg_taps)

    blo, bhi = BIAS_RANGE_MA
    plo, phi = PRF_RANGE_DBM
    bias = ops.range_sigmoid(nodes["theta_bias"], blo, bhi)
    prf = ops.range_sigmoid(nodes["theta_prf"], plo, phi)
    nb = ops.divide(ops.subtract(bias, blo), bhi - blo)
    npr = ops.divide(ops.subtract(prf, plo), phi - plo)
    feats = ops.with_conditioning(drive, nb, npr)
    weight_nodes = {k: tape.constant(v) for k, v in model.weights().items()}
    pred = forward_on_tape(tape, weight_nodes, feats)

    if fixed_noise is None:
        ac_power = float(np.var(pred.value))
        sigma = math.sqrt(ac_power) * 10.0 ** (-snr_db / 20.0)
        noise = rng.normal(0.0, sigma, size=pred.value.shape)
    else:
        noise = fixed_noise
    rx = ops.add_noise(pred, noise)

    y = ops.conv1d(rx, nodes["rx_ffe_taps"])
    y = ops.downsample(y, 2, phase)
    lo, hi = edge_symbols, S - edge_symbols
    if hi <= lo:
        lo, hi = 0, S
    y = ops.crop(y, lo, hi)
    logits = ops.affine(
        ops.expand_last(y),
        ops.reshape(nodes["readout_w"], (1, 4)),
        nodes["readout_b"],
    )
    labels = symbol_batch[:, lo:hi]
    loss = ops.softmax_cross_entropy(logits, labels)
    if not math.isfinite(float(loss.value)):
        raise NumericError("autoencoder loss went non-finite")
    return loss, tape, logits


@dataclass
class TrainReport:
    loss_history: list[float]
    ser_history: list[dict]
    i_bias_ma: float
    p_rf_dbm: float
    wall_clock_s: float
    seed: int
    snr_db: float
    phase: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "loss_history": self.loss_history,
                "ser_history": self.ser_history,
                "i_bias_ma": self.i_bias_ma,
                "p_rf_dbm": self.p_rf_dbm,
                "wall_clock_s": self.wall_clock_s,
                "seed": self.seed,
                "snr_db": self.snr_db,
                "phase": self.phase,
            },
            sort_keys=True,
        )


DEFAULT_AE_TRAIN = {
    "steps": 1500,
    "batch": 8,
    "symbols_per_frame": 256,
    "lr": 5e-3,
    "snr_db": 17.0,
    "seed": 0,
    "rx_ffe_taps": 20,
    "edge_symbols": 16,
    "eval_every": 50,
}


def train_ae(
    model: SurrogateModel,
    symbol_rate: float,
    chain: AnalogChainParams,
    cfg: dict | None = None,
) -> tuple[AeParams, TrainReport]:
    """Adam over every transceiver parameter through the frozen surrogate.

    The downsampling phase is picked once at initialization (2-way sweep on
    training-batch accuracy) and stays fixed. Deterministic per seed.
    """
    hp = dict(DEFAULT_AE_TRAIN)
    hp.update(cfg or {})
    t0 = time.monotonic()
    frozen_before = save_model(model)

    init = init_ae_params(hp["rx_ffe_taps"])
    params = {k: v.copy() for k, v in init.trainable().items()}
    awg = awg_tx_filter(chain, symbol_rate)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(hp["seed"], 0xAE)))

    def batch_symbols() -> np.ndarray:
        return rng.integers(0, 4, size=(hp["batch"], hp["symbols_per_frame"]))

    # fix the downsampling phase: best training-batch accuracy at init
    probe = batch_symbols()
    probe_rng_state = rng.bit_generator.state
    accs = []
    for phase in (0, 1):
        rng.bit_generator.state = probe_rng_state
        loss, tape, logits = ae_loss(
            {k: v.copy() for k, v in params.items()},
            probe, model, hp["snr_db"], rng, awg,
            phase=phase, edge_symbols=hp["edge_symbols"],
        )
        lo = hp["edge_symbols"]
        labels = probe[:, lo : probe.shape[1] - lo]
        accs.append(float(np.mean(np.argmax(logits.value, axis=-1) == labels)))
    phase = int(np.argmax(accs))

    opt = Adam(params, lr=hp["lr"])
    loss_history: list[float] = []
    ser_history: list[dict] = []
    for step in range(hp["steps"]):
        batch = batch_symbols()
        try:
            loss, tape, logits = ae_loss(
                params, batch, model, hp["snr_db"], rng, awg,
                phase=phase, edge_symbols=hp["edge_symbols"],
            )
        except NumericError as exc:
            raise NumericError(
                f"AE training diverged at step {step}: {exc}"
            ) from exc
        grads = tape.backward(loss)
        opt.step(grads)
        loss_history.append(float(loss.value))
        if step % hp["eval_every"] == 0 or step == hp["steps"] - 1:
            lo = hp["edge_symbols"]
            labels = batch[:, lo : batch.shape[1] - lo]
            ser = float(np.mean(np.argmax(logits.value, axis=-1) != labels))
            ser_history.append({"step": step, "ser_on_surrogate": ser})

    frozen_after = save_model(model)
    if frozen_before != frozen_after:
        raise NumericError("surrogate weights changed during AE training")

    trained = AeParams(
        gcs_levels=params["gcs_levels"],
        ps_taps=params["ps_taps"],
        dpd_taps=params["dpd_taps"],
        theta_bias=params["theta_bias"],
        theta_prf=params["theta_prf"],
        rx_ffe_taps=params["rx_ffe_taps"],
        readout_w=params["readout_w"],
        readout_b=params["readout_b"],
        phase=phase,
    )
    report = TrainReport(
        loss_history=loss_history,
        ser_history=ser_history,
        i_bias_ma=trained.i_bias_ma,
        p_rf_dbm=trained.p_rf_dbm,
        wall_clock_s=time.monotonic() - t0,
        seed=hp["seed"],
        snr_db=hp["snr_db"],
        phase=phase,
    )
    return trained, report


# ---------------------------------------------------------------------------
# testbed evaluation
# ---------------------------------------------------------------------------


def test_ae(
    p: AeParams,
    model: SurrogateModel,
    cfg: ChannelConfig,
    symbol_rate: float,
    n_symbols: int,
    seed: int,
    edge_symbols: int = 64,
):
    """Evaluate trained parameters against the rate-equation testbed.

    Pipeline: transmit -> single noisy capture -> synchronize against the
    surrogate's clean prediction -> pilot-based affine scale recovery (the
    capture is in detector units, the receiver was trained on the
    surrogate's normalized scale) -> receive -> argmax -> SER.

    Returns a dict with ser/ci bounds, captures and diagnostics.
    """
    from .evaluation import compute_ser

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x7E57)))
    symbols = rng.integers(0, 4, size=n_symbols)
    frame = sp.SymbolFrame(symbols, symbol_rate)
    tx, i_bias, p_rf = ae_transmit(p, frame, cfg.chain)

    caps_2sps, caps_dso = testbed_propagate_full(
        tx, i_bias, p_rf, 1, int(rng.integers(0, 2**62)), cfg
    )
    capture = caps_2sps[0]

    reference = lstm_forward(model, tx, i_bias, p_rf)
    ref_al, cap_al, lag = sp.align(reference, capture)

    # start on a symbol boundary so sample 2k maps to symbol k
    start = max(0, -lag)
    skip = (-start) % 2
    first_symbol = (start + skip) // 2
    ref_s = ref_al.samples[skip:]
    cap_s = cap_al.samples[skip:]
    n_sym_avail = len(cap_s) // 2
    ref_s = ref_s[: 2 * n_sym_avail]
    cap_s = cap_s[: 2 * n_sym_avail]

    # pilot split: recover the surrogate-domain scale with 2 free parameters
    n_pilot = max(2, int(0.2 * len(cap_s)))
    A = np.stack([cap_s[:n_pilot], np.ones(n_pilot)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ref_s[:n_pilot], rcond=None)
    cap_scaled = coef[0] * cap_s + coef[1]

    logits = ae_receive(p, sp.Waveform(cap_scaled, capture.sample_rate))
    decided = detect(logits)
    truth = symbols[first_symbol : first_symbol + n_sym_avail]
    decided = decided[: truth.size]

    trim = edge_symbols
    if truth.size <= 2 * trim + 10:
        trim = 0
    ser, (ci_lo, ci_hi) = compute_ser(
        sp.SymbolFrame(decided[trim : decided.size - trim], symbol_rate),
        sp.SymbolFrame(truth[trim : truth.size - trim], symbol_rate),
    )
    return {
        "ser": ser,
        "ci95": (ci_lo, ci_hi),
        "n_symbols": int(truth.size - 2 * trim),
        "i_bias_ma": i_bias,
        "p_rf_dbm": p_rf,
        "lag": lag,
        "scale": (float(coef[0]), float(coef[1])),
        "tx_waveform": tx,
        "capture_2sps": sp.Waveform(cap_scaled, capture.sample_rate),
        "capture_dso": caps_dso[0],
    }


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def ae_params_to_json(p: AeParams) -> str:
    payload = {
        "version": AE_VERSION,
        "gcs_levels": p.gcs_levels.tolist(),
        "ps_taps": p.ps_taps.tolist(),
        "dpd_taps": p.dpd_taps.tolist(),
        "theta_bias": float(p.theta_bias[0]),
        "theta_prf": float(p.theta_prf[0]),
        "rx_ffe_taps": p.rx_ffe_taps.tolist(),
        "readout_w": p.readout_w.tolist(),
        "readout_b": p.readout_b.tolist(),
        "phase": p.phase,
        "bias_range_ma": list(p.bias_range_ma),
        "prf_range_dbm": list(p.prf_range_dbm),
        "mapped_i_bias_ma": p.i_bias_ma,
        "mapped_p_rf_dbm": p.p_rf_dbm,
    }
    return json.dumps(payload, sort_keys=True, indent=2)


def ae_params_from_json(text: str) -> AeParams:
    d = json.loads(text)
    if d.get("version") != AE_VERSION:
        raise FormatError(f"unsupported AeParams version {d.get('version')!r}")
    return AeParams(
        gcs_levels=np.array(d["gcs_levels"]),
        ps_taps=np.array(d["ps_taps"]),
        dpd_taps=np.array(d["dpd_taps"]),
        theta_bias=np.array([d["theta_bias"]]),
        theta_prf=np.array([d["theta_prf"]]),
        rx_ffe_taps=np.array(d["rx_ffe_taps"]),
        readout_w=np.array(d["readout_w"]),
        readout_b=np.array(d["readout_b"]),
        phase=int(d["phase"]),
        bias_range_ma=tuple(d["bias_range_ma"]),
        prf_range_dbm=tuple(d["prf_range_dbm"]),
    )


def save_ae_params(p: AeParams) -> bytes:
    header = {
        "version": AE_VERSION,
        "phase": p.phase,
        "n_ffe": int(p.rx_ffe_taps.size),
        "bias_range_ma": list(p.bias_range_ma),
        "prf_range_dbm": list(p.prf_range_dbm),
        "blob_order": ["gcs_levels", "ps_taps", "dpd_taps", "theta_bias",
                       "theta_prf", "rx_ffe_taps", "readout_w", "readout_b"],
    }
    blobs = [p.gcs_levels, p.ps_taps, p.dpd_taps, p.theta_bias, p.theta_prf,
             p.rx_ffe_taps, p.readout_w, p.readout_b]
    return pack(AE_MAGIC, header, blobs)


def load_ae_params(data: bytes) -> AeParams:
    header, flat = unpack(data, AE_MAGIC)
    if header.get("version") != AE_VERSION:
        raise FormatError(f"unsupported AeParams version {header.get('version')!r}")
    n_ffe = int(header["n_ffe"])
    shapes = [(4,), (2,), (5,), (1,), (1,), (n_ffe,), (4,), (4,)]
    gcs, ps, dpd, tb, tp, ffe, rw, rb = split_blob(flat, shapes)
    return AeParams(
        gcs_levels=gcs, ps_taps=ps, dpd_taps=dpd, theta_bias=tb, theta_prf=tp,
        rx_ffe_taps=ffe, readout_w=rw, readout_b=rb,
        phase=int(header["phase"]),
        bias_range_ma=tuple(header["bias_range_ma"]),
        prf_range_dbm=tuple(header["prf_range_dbm"]),
    )
