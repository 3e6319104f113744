"""Finite-difference validation of tape gradients.

``check_gradient`` compares ``Tape.backward`` output against central
differences for an arbitrary scalar-valued builder. ``primitive_checks``
enumerates one named case per primitive; the CLI runs them all and reports
the worst relative error per primitive.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import ops
from .engine import Node, Tape

# A builder maps (tape, {name: Node}) -> scalar loss Node and must be
# deterministic: any randomness (noise injection) is sampled from a fixed
# seed inside the builder.
Builder = Callable[[Tape, dict[str, Node]], Node]


def check_gradient(
    build: Builder, params: dict[str, np.ndarray], h: float = 1e-5
) -> float:
    """Max relative error of tape gradients vs central finite differences.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator,
    checked coordinate-wise over every parameter.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    nodes = {k: tape.param(k, v) for k, v in params.items()}
    loss = build(tape, nodes)
    grads = tape.backward(loss)

    def eval_loss(perturbed: dict[str, np.ndarray]) -> float:
        t = Tape()
        nodes = {k: t.constant(v) for k, v in perturbed.items()}
        return float(build(t, nodes).value)

    worst = 0.0
    for name, base in params.items():
        flat = base.ravel()
        g_flat = grads[name].ravel()
        for i in range(flat.size):
            bumped = dict(params)
            plus = base.copy().ravel()
            plus[i] += h
            bumped[name] = plus.reshape(base.shape)
            f_plus = eval_loss(bumped)
            minus = base.copy().ravel()
            minus[i] -= h
            bumped[name] = minus.reshape(base.shape)
            f_minus = eval_loss(bumped)
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(g_flat[i])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def primitive_checks() -> Iterable[tuple[str, Builder, dict[str, np.ndarray]]]:
    """(name, builder, params) triples exercising every primitive."""
    r = _rng(20240917)
    x6 = r.normal(size=6)
    y6 = r.normal(size=6)
    m23 = r.normal(size=(2, 3))
    m34 = r.normal(size=(3, 4))
    pos6 = np.abs(r.normal(size=6)) + 0.5
    sig = r.normal(size=(2, 16))
    kern5 = r.normal(size=5)
    kern4 = r.normal(size=4)
    noise = r.normal(size=(2, 16))
    logits = r.normal(size=(3, 5, 4))
    labels = r.integers(0, 4, size=(3, 5))
    lstm_x = r.normal(size=(2, 4, 3))
    lstm_wi = r.normal(size=(3, 8)) * 0.5
    lstm_wh = r.normal(size=(2, 8)) * 0.5
    lstm_b = r.normal(size=8) * 0.1

    cases: list[tuple[str, Builder, dict[str, np.ndarray]]] = [
        ("add", lambda t, p: ops.mean(ops.square(ops.add(p["a"], p["b"]))),
         {"a": x6, "b": y6}),
        ("subtract", lambda t, p: ops.mean(ops.square(ops.subtract(p["a"], p["b"]))),
         {"a": x6, "b": y6}),
        ("multiply", lambda t, p: ops.mean(ops.square(ops.multiply(p["a"], p["b"]))),
         {"a": x6, "b": y6}),
        ("divide", lambda t, p: ops.mean(ops.square(ops.divide(p["a"], p["b"]))),
         {"a": x6, "b": pos6}),
        ("matmul", lambda t, p: ops.mean(ops.square(ops.matmul(p["a"], p["b"]))),
         {"a": m23, "b": m34}),
        ("affine", lambda t, p: ops.mean(ops.square(ops.affine(p["x"], p["w"], p["b"]))),
         {"x": r.normal(size=(2, 5, 3)), "w": m34, "b": r.normal(size=4)}),
        ("conv1d", lambda t, p: ops.mean(ops.square(ops.conv1d(p["x"], p["k"]))),
         {"x": sig, "k": kern5}),
        ("conv1d_even", lambda t, p: ops.mean(ops.square(ops.conv1d(p["x"], p["k"]))),
         {"x": sig, "k": kern4}),
        ("upsample", lambda t, p: ops.mean(ops.square(ops.upsample(p["x"], 3))),
         {"x": sig}),
        ("downsample", lambda t, p: ops.mean(ops.square(ops.downsample(p["x"], 2, 1))),
         {"x": sig}),
        ("crop", lambda t, p: ops.mean(ops.square(ops.crop(p["x"], 3, 12))),
         {"x": sig}),
        ("expand_last", lambda t, p: ops.mean(ops.square(ops.expand_last(p["x"]))),
         {"x": x6}),
        ("sigmoid", lambda t, p: ops.mean(ops.square(ops.sigmoid(p["x"]))), {"x": x6}),
        ("tanh", lambda t, p: ops.mean(ops.square(ops.tanh(p["x"]))), {"x": x6}),
        ("exp", lambda t, p: ops.mean(ops.square(ops.exp(p["x"]))), {"x": x6}),
        ("log", lambda t, p: ops.mean(ops.square(ops.log(p["x"]))), {"x": pos6}),
        ("square", lambda t, p: ops.mean(ops.square(ops.square(p["x"]))), {"x": x6}),
        ("sqrt", lambda t, p: ops.mean(ops.square(ops.sqrt(p["x"]))), {"x": pos6}),
        ("mean", lambda t, p: ops.square(ops.mean(p["x"])), {"x": x6}),
        ("mean_last", lambda t, p: ops.mean(ops.square(ops.mean_last(p["x"]))),
         {"x": sig}),
        ("reshape", lambda t, p: ops.mean(ops.square(ops.reshape(p["x"], (4, 8)))),
         {"x": sig}),
        ("squeeze_last",
         lambda t, p: ops.mean(ops.square(ops.squeeze_last(ops.expand_last(p["x"])))),
         {"x": x6}),
        ("softmax_xent",
         lambda t, p: ops.softmax_cross_entropy(p["logits"], labels),
         {"logits": logits}),
        ("range_sigmoid",
         lambda t, p: ops.square(ops.range_sigmoid(p["th"], 50.0, 100.0)),
         {"th": np.asarray(0.37)}),
        ("add_noise",
         lambda t, p: ops.mean(ops.square(ops.add_noise(p["x"], noise))),
         {"x": sig}),
        ("with_conditioning",
         lambda t, p: ops.mean(
             ops.square(ops.with_conditioning(p["x"], p["c1"], p["c2"]))
         ),
         {"x": sig, "c1": np.asarray(0.4), "c2": np.asarray(-0.2)}),
        ("lstm",
         lambda t, p: ops.mean(ops.square(ops.lstm(p["x"], p["wi"], p["wh"], p["b"]))),
         {"x": lstm_x, "wi": lstm_wi, "wh": lstm_wh, "b": lstm_b}),
    ]
    return cases


def run_primitive_checks(h: float = 1e-5) -> dict[str, float]:
    """Worst relative gradient error per primitive case."""
    return {
        name: check_gradient(build, params, h=h)
        for name, build, params in primitive_checks()
    }
