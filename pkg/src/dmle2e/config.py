"""Experiment configuration: one JSON file drives the whole pipeline.

Profiles ``tiny``/``default``/``full`` ship with the package and scale the
sweep symbol counts 1e4 / 1e5 / 1e6. Every random choice descends from the
mandatory ``seed``; no command reads entropy anywhere else. The environment
variable ``DMLE2E_OUT`` overrides the output root.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .channel import ChannelConfig, load_channel_config
from .errors import InvalidArgumentError

PROFILES = ("tiny", "default", "full")

_DEFAULTS = {
    "symbol_rates_hz": [20e9, 30e9],
    "channel_config": None,
    "output_dir": "out",
    "dataset": {"n_sequences": 96, "symbols_per_seq": 512, "n_copies": 25},
    "surrogate": {
        "hidden_size": 64,
        "lr": 5e-3,
        "lr_decay": 0.05,
        "batch": 16,
        "epochs": 300,
        "split": 0.9,
        "truncate_len": 256,
        "warmup": 32,
        "eval_every": 5,
        "mse_bound": 1e-3,
    },
    "ae": {
        "steps": 1500,
        "batch": 8,
        "symbols_per_frame": 256,
        "lr": 5e-3,
        "snr_db": None,
        "rx_ffe_taps": 20,
        "edge_symbols": 16,
        "eval_every": 50,
    },
    "baseline": {"i_bias_ma": 75.0, "p_rf_dbm": 0.0},
    "sweep": {
        "p_rf_grid_dbm": [-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0],
        "n_symbols": 100000,
        "n_train_symbols": 6000,
    },
    "eye": {"n_traces": 400, "sps": 8},
}


@dataclass
class ExperimentConfig:
    seed: int
    symbol_rates_hz: list[float]
    channel_config_path: str | None
    output_dir: Path
    dataset: dict
    surrogate: dict
    ae: dict
    baseline: dict
    sweep: dict
    eye: dict
    source_path: Path | None = None

    def channel(self) -> ChannelConfig:
        return load_channel_config(self.channel_config_path)

    def rate_dir(self, symbol_rate: float) -> Path:
        return self.output_dir / f"r{symbol_rate / 1e9:g}g"


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment config; seed is mandatory."""
    p = Path(path)
    if not p.exists():
        raise InvalidArgumentError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"config is not valid JSON: {exc}") from exc
    if "seed" not in raw:
        raise InvalidArgumentError("config must set an explicit integer seed")
    merged = _merge(_DEFAULTS, raw)

    chan = merged.get("channel_config")
    if chan is not None:
        chan = str((p.parent / chan).resolve()) if not os.path.isabs(chan) else chan
        if not Path(chan).exists():
            raise InvalidArgumentError(f"channel config {chan} does not exist")

    rates = [float(r) for r in merged["symbol_rates_hz"]]
    if not rates or any(r <= 0 for r in rates):
        raise InvalidArgumentError("symbol_rates_hz must be positive")

    out_dir = Path(merged["output_dir"])
    out_root = os.environ.get("DMLE2E_OUT")
    if out_root:
        out_dir = Path(out_root) / (out_dir.name if out_dir.is_absolute() else out_dir)
    elif not out_dir.is_absolute():
        out_dir = p.parent / out_dir

    return ExperimentConfig(
        seed=int(raw["seed"]),
        symbol_rates_hz=rates,
        channel_config_path=chan,
        output_dir=out_dir,
        dataset=merged["dataset"],
        surrogate=merged["surrogate"],
        ae=merged["ae"],
        baseline=merged["baseline"],
        sweep=merged["sweep"],
        eye=merged["eye"],
        source_path=p,
    )


def profile_config_path(name: str) -> Path:
    if name not in PROFILES:
        raise InvalidArgumentError(f"unknown profile {name!r}; choose from {PROFILES}")
    return Path(str(resources.files("dmle2e").joinpath(f"configs/profile-{name}.json")))
