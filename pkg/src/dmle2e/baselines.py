"""Receiver-equalized reference systems: RRC transmit pulse + matched
filter, then either a linear feedforward equalizer (20 taps) or a Volterra
nonlinear equalizer (20 first-order + 10 second-order taps), both with
per-class Gaussian maximum-likelihood detection.

Equalizers are fractionally spaced: features come from the 2 SpS window
around each symbol instant, output is one value per symbol. Coefficients
come from ridge-regularized least squares in closed form (no adaptation
hyperparameters), fitted on the leading split of each capture.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import sigproc as sp
from .channel import ChannelConfig, testbed_propagate_full
from .errors import InvalidArgumentError, NumericError

RRC_TAPS = 17
RRC_ROLLOFF = 0.1
TX_LEVELS = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
TX_LEVELS_CENTERED = TX_LEVELS - TX_LEVELS.mean()

N_LINEAR_TAPS = 20
N_SQUARE_TAPS = 10
#: sample offsets of the linear window relative to the symbol instant
LINEAR_OFFSETS = np.arange(-N_LINEAR_TAPS // 2, N_LINEAR_TAPS // 2)
#: the most central samples, squared, for the second-order kernel
SQUARE_OFFSETS = np.arange(-N_SQUARE_TAPS // 2, N_SQUARE_TAPS // 2)
#: optional triangular cross-term kernel of the same size (see fit_equalizer)
CROSS_PAIRS = [(i, j) for i in range(-2, 2) for j in range(i, 2)]


@dataclass
class EqualizerModel:
    kind: str                       # "ffe" | "vnle"
    linear_taps: np.ndarray         # (20,)
    second_order_taps: np.ndarray   # (10,) vnle only, else empty
    bias_term: float
    class_means: np.ndarray         # (4,)
    class_vars: np.ndarray          # (4,)
    second_order: str = "diagonal"  # "diagonal" | "cross"

    def __post_init__(self):
        if self.kind not in ("ffe", "vnle"):
            raise InvalidArgumentError(f"unknown equalizer kind {self.kind!r}")
        self.linear_taps = np.asarray(self.linear_taps, dtype=np.float64)
        self.second_order_taps = np.asarray(self.second_order_taps, dtype=np.float64)
        if self.linear_taps.shape != (N_LINEAR_TAPS,):
            raise InvalidArgumentError(f"expected {N_LINEAR_TAPS} linear taps")
        if self.kind == "vnle" and self.second_order_taps.shape != (N_SQUARE_TAPS,):
            raise InvalidArgumentError(f"expected {N_SQUARE_TAPS} second-order taps")
        if np.any(np.asarray(self.class_vars) <= 0):
            raise InvalidArgumentError("class variances must be positive")

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "linear_taps": self.linear_taps.tolist(),
                "second_order_taps": self.second_order_taps.tolist(),
                "bias_term": self.bias_term,
                "class_means": np.asarray(self.class_means).tolist(),
                "class_vars": np.asarray(self.class_vars).tolist(),
                "second_order": self.second_order,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EqualizerModel":
        d = json.loads(text)
        return cls(
            kind=d["kind"],
            linear_taps=np.array(d["linear_taps"]),
            second_order_taps=np.array(d["second_order_taps"]),
            bias_term=d["bias_term"],
            class_means=np.array(d["class_means"]),
            class_vars=np.array(d["class_vars"]),
            second_order=d.get("second_order", "diagonal"),
        )


def tx_rrc(symbols: sp.SymbolFrame) -> sp.Waveform:
    """Mean-removed equispaced 4PAM through a 17-tap RRC at 2 SpS, unit RMS."""
    amp = TX_LEVELS_CENTERED[symbols.indices]
    x = sp.upsample_insert(amp, 2)
    rrc = sp.design_rrc(RRC_TAPS, RRC_ROLLOFF, 2)
    y = np.convolve(x, rrc.taps, mode="same")
    y = y / math.sqrt(float(np.mean(y**2)))
    return sp.Waveform(y, 2.0 * symbols.symbol_rate)


def rx_matched(rx: sp.Waveform) -> sp.Waveform:
    """Matched filter: the same (symmetric) RRC taps."""
    rrc = sp.design_rrc(RRC_TAPS, RRC_ROLLOFF, 2)
    return sp.fir_apply(rx, rrc)


def _feature_matrix(samples: np.ndarray, sym_idx: np.ndarray, kind: str,
                    second_order: str = "diagonal") -> np.ndarray:
    """Per-symbol feature rows from the 2 SpS window around 2k."""
    centers = 2 * sym_idx
    cols = [samples[centers + off] for off in LINEAR_OFFSETS]
    if kind == "vnle":
        if second_order == "diagonal":
            cols += [samples[centers + off] ** 2 for off in SQUARE_OFFSETS]
        else:
            cols += [
                samples[centers + i] * samples[centers + j] for i, j in CROSS_PAIRS
            ]
    cols.append(np.ones(sym_idx.size))
    return np.stack(cols, axis=1)


def fit_equalizer(
    kind: str,
    train_rx: sp.Waveform,
    train_symbols: sp.SymbolFrame,
    sync_lag: int = 0,
    second_order: str = "diagonal",
) -> EqualizerModel:
    """Ridge least squares against the centered target levels.

    ``train_rx`` at 2 SpS, already aligned up to ``sync_lag`` (symbol k at
    sample 2k + sync_lag). Requires at least 50 training symbols per
    coefficient. Also estimates per-class Gaussian statistics of the
    equalized training output for ML detection.
    """
    if kind not in ("ffe", "vnle"):
        raise InvalidArgumentError(f"unknown equalizer kind {kind!r}")
    samples = train_rx.samples[sync_lag:] if sync_lag > 0 else train_rx.samples
    n_sym = min(train_symbols.indices.size, len(samples) // 2)
    margin = N_LINEAR_TAPS // 4 + 2  # keep every window inside the capture
    sym_idx = np.arange(margin, n_sym - margin)
    n_coef = (
        N_LINEAR_TAPS + 1 if kind == "ffe" else N_LINEAR_TAPS + N_SQUARE_TAPS + 1
    )
    if sym_idx.size < 50 * n_coef:
        raise InvalidArgumentError(
            f"need >= {50 * n_coef} training symbols for {n_coef} coefficients, "
            f"got {sym_idx.size}"
        )
    X = _feature_matrix(samples, sym_idx, kind, second_order)
    y = TX_LEVELS_CENTERED[train_symbols.indices[sym_idx]]

    gram = X.T @ X
    lam = 1e-6 * np.trace(gram) / gram.shape[0]
    gram[np.diag_indices_from(gram)] += lam
    try:
        coef = np.linalg.solve(gram, X.T @ y)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"equalizer normal equations are singular: {exc}") from exc
    if not np.all(np.isfinite(coef)):
        raise NumericError("equalizer solve produced non-finite coefficients")

    out = X @ coef
    means = np.empty(4)
    varis = np.empty(4)
    labels = train_symbols.indices[sym_idx]
    for c in range(4):
        sel = out[labels == c]
        if sel.size < 2:
            raise InvalidArgumentError(f"class {c} missing from training symbols")
        means[c] = sel.mean()
        varis[c] = max(float(sel.var(ddof=1)), 1e-12)

    second = coef[N_LINEAR_TAPS:-1] if kind == "vnle" else np.empty(0)
    return EqualizerModel(
        kind=kind,
        linear_taps=coef[:N_LINEAR_TAPS],
        second_order_taps=second,
        bias_term=float(coef[-1]),
        class_means=means,
        class_vars=varis,
        second_order=second_order,
    )


def equalize(model: EqualizerModel, samples: np.ndarray, sym_idx: np.ndarray) -> np.ndarray:
    X = _feature_matrix(samples, sym_idx, model.kind, model.second_order)
    coef = np.concatenate(
        [model.linear_taps, model.second_order_taps, [model.bias_term]]
    )
    return X @ coef


def ml_detect(equalized: np.ndarray, class_means, class_vars) -> np.ndarray:
    """Per-sample argmax of Gaussian log-likelihood; ties go to the lowest
    class index (argmax keeps the first maximum)."""
    mu = np.asarray(class_means, dtype=np.float64)
    var = np.asarray(class_vars, dtype=np.float64)
    y = np.asarray(equalized, dtype=np.float64)[:, None]
    ll = -((y - mu) ** 2) / (2.0 * var) - 0.5 * np.log(var)
    return np.argmax(ll, axis=1)


def run_baseline(
    kind: str,
    cfg: ChannelConfig,
    i_bias_ma: float,
    p_rf_dbm: float,
    n_train: int,
    n_test: int,
    seed: int,
    symbol_rate: float = 20e9,
    second_order: str = "diagonal",
    edge_symbols: int = 64,
):
    """Transmit, capture once, fit on the leading split, detect on the rest.

    Returns a dict with ser/ci bounds, the fitted model and retained
    waveforms for eye/spectrum analysis.
    """
    from .evaluation import compute_ser

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xBA5E)))
    symbols = rng.integers(0, 4, size=n_train + n_test)
    frame = sp.SymbolFrame(symbols, symbol_rate)
    tx = tx_rrc(frame)

    caps_2sps, caps_dso = testbed_propagate_full(
        tx, i_bias_ma, p_rf_dbm, 1, int(rng.integers(0, 2**62)), cfg
    )
    capture = caps_2sps[0]

    tx_al, cap_al, lag = sp.align(tx, capture)
    start = max(0, -lag)
    skip = start % 2
    first_symbol = (start + skip) // 2
    cap_s = cap_al.samples[skip:]
    matched = rx_matched(sp.Waveform(cap_s, capture.sample_rate))

    n_sym_avail = len(matched) // 2
    labels = symbols[first_symbol : first_symbol + n_sym_avail]
    split = min(n_train - first_symbol, n_sym_avail)
    train_frame = sp.SymbolFrame(labels[:split], symbol_rate)
    model = fit_equalizer(
        kind,
        sp.Waveform(matched.samples[: 2 * split], matched.sample_rate),
        train_frame,
        second_order=second_order,
    )

    margin = N_LINEAR_TAPS // 2 + 1
    test_idx = np.arange(split + margin, n_sym_avail - margin)
    out = equalize(model, matched.samples, test_idx)
    decided = ml_detect(out, model.class_means, model.class_vars)
    truth = labels[test_idx]

    trim = edge_symbols if truth.size > 2 * edge_symbols + 10 else 0
    ser, (ci_lo, ci_hi) = compute_ser(
        sp.SymbolFrame(decided[trim : decided.size - trim], symbol_rate),
        sp.SymbolFrame(truth[trim : truth.size - trim], symbol_rate),
    )
    return {
        "ser": ser,
        "ci95": (ci_lo, ci_hi),
        "n_symbols": int(truth.size - 2 * trim),
        "model": model,
        "lag": lag,
        "tx_waveform": tx,
        "capture_2sps": capture,
        "capture_dso": caps_dso[0],
    }
