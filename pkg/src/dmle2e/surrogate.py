"""Data-driven recurrent stand-in for the measured link.

The dataset pairs randomized 2-SpS transmit sequences with synchronized,
copy-averaged, [0,1]-normalized captures at randomized operating points.
A single-layer LSTM with a scalar affine readout consumes per-step features
[drive sample, normalized bias, normalized RF power] and is trained with
Adam on MSE. Once trained its weights are frozen; the end-to-end optimizer
differentiates through it.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sigproc as sp
from ._container import pack, split_blob, unpack
from .channel import ChannelConfig, testbed_propagate
from .errors import FormatError, InvalidArgumentError, TrainingError
from .grad import Tape, ops
from .optim import Adam

MODEL_MAGIC = b"DMLSUR01"
MODEL_VERSION = 2

BIAS_RANGE_MA = (50.0, 100.0)
PRF_RANGE_DBM = (-4.0, 2.0)

#: number of per-step input features: drive sample + 2 conditioning values
N_FEATURES = 3


@dataclass
class SurrogateModel:
    """Stacked-LSTM weights + readout + conditioning normalization.

    Gate blocks along the 4H axis are ordered [input, forget, cell, output]
    (the grad.ops.lstm convention). The second recurrent layer and the
    scalar drive->output skip tap are optional (both present by default;
    they buy a large fidelity margin on resonance-heavy waveforms).
    """

    hidden_size: int
    w_ih: np.ndarray   # (3, 4H)
    w_hh: np.ndarray   # (H, 4H)
    b: np.ndarray      # (4H,)
    w_ro: np.ndarray   # (H, 1)
    b_ro: np.ndarray   # (1,)
    w_ih2: np.ndarray | None = None   # (H, 4H) second layer
    w_hh2: np.ndarray | None = None   # (H, 4H)
    b2: np.ndarray | None = None      # (4H,)
    w_skip: np.ndarray | None = None  # (1,) drive sample -> output
    bias_range_ma: tuple[float, float] = BIAS_RANGE_MA
    prf_range_dbm: tuple[float, float] = PRF_RANGE_DBM

    def __post_init__(self):
        h = self.hidden_size
        expect = {
            "w_ih": (N_FEATURES, 4 * h),
            "w_hh": (h, 4 * h),
            "b": (4 * h,),
            "w_ro": (h, 1),
            "b_ro": (1,),
            "w_ih2": (h, 4 * h),
            "w_hh2": (h, 4 * h),
            "b2": (4 * h,),
            "w_skip": (1,),
        }
        second = [self.w_ih2, self.w_hh2, self.b2]
        if any(a is None for a in second) and not all(a is None for a in second):
            raise InvalidArgumentError("second layer weights must all be set or none")
        for name, shape in expect.items():
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.ascontiguousarray(value, dtype=np.float64)
            if arr.shape != shape:
                raise InvalidArgumentError(
                    f"SurrogateModel.{name} must have shape {shape}, got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"SurrogateModel.{name} has non-finite values")
            setattr(self, name, arr)

    @property
    def n_layers(self) -> int:
        return 2 if self.w_ih2 is not None else 1

    def weights(self) -> dict[str, np.ndarray]:
        out = {
            "w_ih": self.w_ih,
            "w_hh": self.w_hh,
            "b": self.b,
            "w_ro": self.w_ro,
            "b_ro": self.b_ro,
        }
        if self.w_ih2 is not None:
            out.update({"w_ih2": self.w_ih2, "w_hh2": self.w_hh2, "b2": self.b2})
        if self.w_skip is not None:
            out["w_skip"] = self.w_skip
        return out

    def normalize_conditioning(self, i_bias_ma: float, p_rf_dbm: float):
        blo, bhi = self.bias_range_ma
        plo, phi = self.prf_range_dbm
        return (i_bias_ma - blo) / (bhi - blo), (p_rf_dbm - plo) / (phi - plo)


@dataclass
class SurrogateEntry:
    input: sp.Waveform      # 2 SpS drive, pre-AWG-filter digital domain
    output: sp.Waveform     # averaged, [0,1]-normalized, synchronized capture
    i_bias_ma: float
    p_rf_dbm: float
    norm_scale: float
    norm_offset: float
    snr_db: float           # single-capture SNR estimated from the copies


@dataclass
class SurrogateDataset:
    entries: list[SurrogateEntry]
    symbol_rate: float
    rng_seed: int
    n_copies: int = 25

    def __len__(self):
        return len(self.entries)


def gen_dataset(
    n_sequences: int,
    symbols_per_seq: int,
    rng_seed: int,
    cfg: ChannelConfig,
    symbol_rate: float = 20e9,
    n_copies: int = 25,
) -> SurrogateDataset:
    """Randomized training corpus from the simulated testbed.

    Per sequence: equiprobable 4PAM symbols shaped by one of two randomized
    families, operating point ~ U[50,100] mA x U[-4,2] dBm, then
    ``n_copies`` captures which are synchronized, averaged and normalized.

    Shaping families (50/50):
      * smooth: a random RRC (rolloff ~ U[0.1, 1.0], 9..33 odd taps) chased
        by a small random 3-tap perturbation;
      * transmit-DSP: randomly perturbed 4 levels, a random 2-tap shaper, a
        random 5-tap predistorter and the AWG-matching low-pass - the same
        parameterization the end-to-end optimizer searches over, so its
        whole reachable waveform family is in-distribution.
    """
    from .channel import awg_tx_filter

    if n_sequences < 1:
        raise InvalidArgumentError("n_sequences must be >= 1")
    levels = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    awg_taps = awg_tx_filter(cfg.chain, symbol_rate)
    entries = []
    for i in range(n_sequences):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(rng_seed, i)))
        symbols = rng.integers(0, 4, symbols_per_seq)
        use_rrc = rng.uniform() < 0.5
        rolloff = rng.uniform(0.1, 1.0)
        n_taps = int(rng.choice(np.arange(9, 35, 2)))
        perturb = np.array([rng.uniform(-0.15, 0.15), 1.0, rng.uniform(-0.15, 0.15)])
        lvl_jitter = rng.uniform(-0.12, 0.12, size=4)
        ps2 = np.array([1.0, rng.uniform(-1.0, 1.0)])
        dpd5 = rng.uniform(-0.4, 0.4, size=5)
        dpd5[2] = 1.0
        i_bias = rng.uniform(*BIAS_RANGE_MA)
        p_rf = rng.uniform(*PRF_RANGE_DBM)
        testbed_seed = int(rng.integers(0, 2**62))

        if use_rrc:
            shaper = sp.design_rrc(n_taps, rolloff, 2)
            amps = levels[symbols] - levels.mean()
            x = sp.upsample_insert(amps, 2)
            x = np.convolve(x, shaper.taps, mode="same")
            x = np.convolve(x, perturb, mode="same")
        else:
            lv = levels + lvl_jitter
            amps = lv[symbols] - lv.mean()
            x = sp.upsample_insert(amps, 2)
            x = np.convolve(x, ps2, mode="same")
            x = np.convolve(x, dpd5, mode="same")
            x = np.convolve(x, awg_taps, mode="same")
        x = x - x.mean()
        # unit RMS, matching the transmit-DSP output convention: the
        # surrogate's drive-sample feature scale must be shared by dataset
        # and optimizer inputs (the testbed renormalizes internally either way)
        x = x / np.sqrt(np.mean(x**2))
        drive = sp.Waveform(x, 2.0 * symbol_rate)

        copies = testbed_propagate(drive, i_bias, p_rf, n_copies, testbed_seed, cfg)
        avg = sp.average_copies(copies)
        ref, meas, lag = sp.align(drive, avg)
        norm, scale, offset = sp.normalize01(meas)
        lo = max(0, -lag)
        hi = lo + len(ref)
        aligned_copies = [
            sp.Waveform(c.samples[lo + lag : hi + lag], c.sample_rate) for c in copies
        ]
        snr_db = sp.estimate_snr(aligned_copies)
        entries.append(
            SurrogateEntry(
                input=ref,
                output=norm,
                i_bias_ma=float(i_bias),
                p_rf_dbm=float(p_rf),
                norm_scale=scale,
                norm_offset=offset,
                snr_db=snr_db,
            )
        )
    return SurrogateDataset(
        entries=entries,
        symbol_rate=symbol_rate,
        rng_seed=rng_seed,
        n_copies=n_copies,
    )


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def features_for(model: SurrogateModel, batch: np.ndarray,
                 i_bias_ma, p_rf_dbm) -> np.ndarray:
    """(B, T) drive samples + per-row conditioning -> (B, T, 3) features."""
    B, T = batch.shape
    nb, npr = model.normalize_conditioning(
        np.asarray(i_bias_ma, dtype=np.float64),
        np.asarray(p_rf_dbm, dtype=np.float64),
    )
    feats = np.empty((B, T, N_FEATURES))
    feats[..., 0] = batch
    feats[..., 1] = np.broadcast_to(np.reshape(nb, (-1, 1)), (B, T))
    feats[..., 2] = np.broadcast_to(np.reshape(npr, (-1, 1)), (B, T))
    return feats


def forward_on_tape(tape: Tape, weights: dict, feats) -> "ops.Node":
    """(B, T, 3) features -> (B, T) predicted capture, on the tape.

    ``weights`` holds Nodes (trainable or constant). The drive for the skip
    tap is recovered from feature 0, so gradients route through it."""
    h = ops.lstm(feats, weights["w_ih"], weights["w_hh"], weights["b"])
    if "w_ih2" in weights:
        h = ops.lstm(h, weights["w_ih2"], weights["w_hh2"], weights["b2"])
    pred = ops.squeeze_last(ops.affine(h, weights["w_ro"], weights["b_ro"]))
    if "w_skip" in weights:
        drive = ops.squeeze_last(ops.crop(feats, 0, 1))
        pred = ops.add(pred, ops.multiply(drive, weights["w_skip"]))
    return pred


def lstm_forward(
    model: SurrogateModel, input: sp.Waveform, i_bias_ma: float, p_rf_dbm: float
) -> sp.Waveform:
    """Predicted normalized capture for one drive waveform (inference)."""
    feats = features_for(model, input.samples[None, :], [i_bias_ma], [p_rf_dbm])
    tape = Tape()
    nodes = {k: tape.constant(v) for k, v in model.weights().items()}
    pred = forward_on_tape(tape, nodes, tape.constant(feats))
    return sp.Waveform(pred.value[0], input.sample_rate)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

DEFAULT_HYPER = {
    "hidden_size": 64,
    "n_layers": 2,
    "skip": True,
    "lr": 5e-3,
    "lr_decay": 0.1,      # total decay factor reached at the final step
    "batch": 16,
    "epochs": 300,
    "split": 0.9,
    "truncate_len": 384,
    "warmup": 64,
    "eval_warmup": 96,    # samples excluded from reported train/val MSE
    "eval_every": 5,      # epochs between train/val MSE evaluations
    "seed": 0,
}


def init_model(
    hidden_size: int, seed: int, n_layers: int = 2, skip: bool = True
) -> SurrogateModel:
    if n_layers not in (1, 2):
        raise InvalidArgumentError("n_layers must be 1 or 2")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xA11CE)))
    h = hidden_size
    k = 1.0 / math.sqrt(h)
    w_ih = rng.uniform(-k, k, size=(N_FEATURES, 4 * h))
    w_hh = rng.uniform(-k, k, size=(h, 4 * h))
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0  # open forget gates at init
    w_ro = rng.uniform(-k, k, size=(h, 1))
    b_ro = np.array([0.5])  # captures live in [0,1]
    extra = {}
    if n_layers == 2:
        b2 = np.zeros(4 * h)
        b2[h : 2 * h] = 1.0
        extra.update(
            w_ih2=rng.uniform(-k, k, size=(h, 4 * h)),
            w_hh2=rng.uniform(-k, k, size=(h, 4 * h)),
            b2=b2,
        )
    if skip:
        extra["w_skip"] = np.zeros(1)
    return SurrogateModel(h, w_ih, w_hh, b, w_ro, b_ro, **extra)


def _model_from_params(hidden_size: int, params: dict) -> SurrogateModel:
    return SurrogateModel(
        hidden_size,
        params["w_ih"].copy(),
        params["w_hh"].copy(),
        params["b"].copy(),
        params["w_ro"].copy(),
        params["b_ro"].copy(),
        w_ih2=params["w_ih2"].copy() if "w_ih2" in params else None,
        w_hh2=params["w_hh2"].copy() if "w_hh2" in params else None,
        b2=params["b2"].copy() if "b2" in params else None,
        w_skip=params["w_skip"].copy() if "w_skip" in params else None,
    )


def _dataset_mse(
    model: SurrogateModel, entries: list[SurrogateEntry], warmup: int = 0
) -> float:
    """Mean squared error over entries, excluding the first ``warmup``
    samples of each sequence (a causal model cannot know the hidden laser
    state at t=0; the carrier lifetime spans tens of samples)."""
    if not entries:
        return math.nan
    lengths = {len(e.input) for e in entries}
    if len(lengths) == 1:
        # one batched recurrent pass over equal-length entries
        xs = np.stack([e.input.samples for e in entries])
        ys = np.stack([e.output.samples for e in entries])
        feats = features_for(
            model,
            xs,
            [e.i_bias_ma for e in entries],
            [e.p_rf_dbm for e in entries],
        )
        tape = Tape()
        nodes = {k: tape.constant(v) for k, v in model.weights().items()}
        pred = forward_on_tape(tape, nodes, tape.constant(feats))
        return float(np.mean((pred.value - ys)[:, warmup:] ** 2))
    total, count = 0.0, 0
    for e in entries:
        pred = lstm_forward(model, e.input, e.i_bias_ma, e.p_rf_dbm)
        err = (pred.samples - e.output.samples)[warmup:]
        total += float(np.sum(err**2))
        count += err.size
    return total / count


def train_surrogate(
    ds: SurrogateDataset, hyper: dict | None = None
) -> tuple[SurrogateModel, list[dict]]:
    """Adam / MSE training with truncated-sequence minibatches.

    Returns the best-on-validation model and a history of
    {step, train_mse, val_mse} rows (one per epoch). Raises TrainingError
    carrying the last finite checkpoint if the loss diverges.
    """
    hp = dict(DEFAULT_HYPER)
    hp.update(hyper or {})
    n = len(ds.entries)
    order = np.random.default_rng(
        np.random.SeedSequence(entropy=(hp["seed"], 0x5B117))
    ).permutation(n)
    n_train = max(1, int(round(hp["split"] * n)))
    if n - n_train < 1 and n >= 2 and hp["split"] < 1.0:
        n_train = n - 1
    train_entries = [ds.entries[i] for i in order[:n_train]]
    val_entries = [ds.entries[i] for i in order[n_train:]]
    if hp["split"] < 1.0 and not val_entries:
        raise InvalidArgumentError(
            "dataset too small for the requested split (no validation entries)"
        )

    model = init_model(
        hp["hidden_size"], hp["seed"], n_layers=hp["n_layers"], skip=hp["skip"]
    )
    params = {k: v.copy() for k, v in model.weights().items()}
    opt = Adam(params, lr=hp["lr"])
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(hp["seed"], 0xBA7C4)))

    t_len = hp["truncate_len"]
    warmup = hp["warmup"]
    min_len = min(len(e.input) for e in train_entries)
    t_len = min(t_len, min_len)
    steps_per_epoch = max(1, math.ceil(n_train / hp["batch"]))
    total_steps = hp["epochs"] * steps_per_epoch
    decay = hp.get("lr_decay", 1.0) ** (1.0 / max(total_steps - 1, 1))
    eval_every = max(1, int(hp.get("eval_every", 1)))

    history: list[dict] = []
    best = {"val": math.inf, "params": copy.deepcopy(params)}
    last_good = copy.deepcopy(params)
    step = 0
    for epoch in range(hp["epochs"]):
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, n_train, size=hp["batch"])
            starts = [
                rng.integers(0, len(train_entries[i].input) - t_len + 1) for i in idx
            ]
            xs = np.stack(
                [
                    train_entries[i].input.samples[s : s + t_len]
                    for i, s in zip(idx, starts)
                ]
            )
            ys = np.stack(
                [
                    train_entries[i].output.samples[s : s + t_len]
                    for i, s in zip(idx, starts)
                ]
            )
            feats = features_for(
                model,
                xs,
                [train_entries[i].i_bias_ma for i in idx],
                [train_entries[i].p_rf_dbm for i in idx],
            )
            tape = Tape()
            nodes = {k: tape.param(k, v) for k, v in params.items()}
            pred = forward_on_tape(tape, nodes, tape.constant(feats))
            err = ops.subtract(pred, tape.constant(ys))
            if warmup > 0 and t_len > warmup:
                # crops start mid-sequence with a cold LSTM state; the first
                # samples only warm the state up and are excluded from the loss
                err = ops.crop(err, warmup, t_len)
            loss = ops.mean(ops.square(err))
            if not math.isfinite(float(loss.value)):
                raise TrainingError(
                    f"training loss diverged at step {step}",
                    checkpoint=_model_from_params(hp["hidden_size"], last_good),
                )
            grads = tape.backward(loss)
            last_good = copy.deepcopy(params)
            opt.step(grads)
            opt.lr *= decay
            step += 1

        if (epoch + 1) % eval_every and epoch != hp["epochs"] - 1:
            continue
        snapshot = _model_from_params(hp["hidden_size"], params)
        eval_warmup = int(hp.get("eval_warmup", 0))
        train_mse = _dataset_mse(snapshot, train_entries, eval_warmup)
        val_mse = _dataset_mse(snapshot, val_entries, eval_warmup)
        if not (math.isfinite(train_mse) or math.isnan(train_mse)):
            raise TrainingError(
                f"evaluation diverged at epoch {epoch}",
                checkpoint=_model_from_params(hp["hidden_size"], last_good),
            )
        history.append({"step": step, "train_mse": train_mse, "val_mse": val_mse})
        score = val_mse if val_entries else train_mse
        if score < best["val"]:
            best = {"val": score, "params": copy.deepcopy(params)}

    return _model_from_params(hp["hidden_size"], best["params"]), history


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


_BLOB_SHAPES = {
    "w_ih": lambda h: (N_FEATURES, 4 * h),
    "w_hh": lambda h: (h, 4 * h),
    "b": lambda h: (4 * h,),
    "w_ro": lambda h: (h, 1),
    "b_ro": lambda h: (1,),
    "w_ih2": lambda h: (h, 4 * h),
    "w_hh2": lambda h: (h, 4 * h),
    "b2": lambda h: (4 * h,),
    "w_skip": lambda h: (1,),
}


def save_model(model: SurrogateModel) -> bytes:
    """Versioned container: magic, JSON header, float64 weight blob."""
    weights = model.weights()
    order = [k for k in _BLOB_SHAPES if k in weights]
    header = {
        "version": MODEL_VERSION,
        "hidden_size": model.hidden_size,
        "input_size": N_FEATURES,
        "n_layers": model.n_layers,
        "bias_range_ma": list(model.bias_range_ma),
        "prf_range_dbm": list(model.prf_range_dbm),
        "blob_order": order,
    }
    return pack(MODEL_MAGIC, header, [weights[k] for k in order])


def load_model(data: bytes) -> SurrogateModel:
    header, flat = unpack(data, MODEL_MAGIC)
    if header.get("version") != MODEL_VERSION:
        raise FormatError(
            f"unsupported surrogate model version {header.get('version')!r}"
        )
    h = int(header["hidden_size"])
    order = header["blob_order"]
    unknown = [k for k in order if k not in _BLOB_SHAPES]
    if unknown:
        raise FormatError(f"unknown weight blobs {unknown}")
    shapes = [_BLOB_SHAPES[k](h) for k in order]
    values = dict(zip(order, split_blob(flat, shapes)))
    return SurrogateModel(
        h,
        values["w_ih"],
        values["w_hh"],
        values["b"],
        values["w_ro"],
        values["b_ro"],
        w_ih2=values.get("w_ih2"),
        w_hh2=values.get("w_hh2"),
        b2=values.get("b2"),
        w_skip=values.get("w_skip"),
        bias_range_ma=tuple(header["bias_range_ma"]),
        prf_range_dbm=tuple(header["prf_range_dbm"]),
    )


def save_model_file(model: SurrogateModel, path) -> None:
    Path(path).write_bytes(save_model(model))


def load_model_file(path) -> SurrogateModel:
    return load_model(Path(path).read_bytes())


def save_dataset(ds: SurrogateDataset, directory) -> None:
    """Directory layout: meta.json + per-entry binary waveform pairs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": 1,
        "symbol_rate": ds.symbol_rate,
        "rng_seed": ds.rng_seed,
        "n_copies": ds.n_copies,
        "entries": [
            {
                "i_bias_ma": e.i_bias_ma,
                "p_rf_dbm": e.p_rf_dbm,
                "norm_scale": e.norm_scale,
                "norm_offset": e.norm_offset,
                "snr_db": e.snr_db,
                "n_samples": len(e.input),
            }
            for e in ds.entries
        ],
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    for i, e in enumerate(ds.entries):
        sp.write_binary(e.input, d / f"input_{i:04d}.bin")
        sp.write_binary(e.output, d / f"output_{i:04d}.bin")


def load_dataset(directory) -> SurrogateDataset:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise FormatError(f"{directory} is not a dataset directory (no meta.json)")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != 1:
        raise FormatError(f"unsupported dataset version {meta.get('version')!r}")
    entries = []
    for i, em in enumerate(meta["entries"]):
        inp = sp.read_binary(d / f"input_{i:04d}.bin")
        out = sp.read_binary(d / f"output_{i:04d}.bin")
        entries.append(
            SurrogateEntry(
                input=inp,
                output=out,
                i_bias_ma=em["i_bias_ma"],
                p_rf_dbm=em["p_rf_dbm"],
                norm_scale=em["norm_scale"],
                norm_offset=em["norm_offset"],
                snr_db=em["snr_db"],
            )
        )
    return SurrogateDataset(
        entries=entries,
        symbol_rate=meta["symbol_rate"],
        rng_seed=meta["rng_seed"],
        n_copies=meta["n_copies"],
    )
