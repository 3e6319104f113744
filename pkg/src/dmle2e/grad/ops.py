"""Differentiable primitives recorded on a Tape.

Every op takes Nodes (or array-likes, promoted to constants on the same
tape) and records forward value + vector-Jacobian products. Convolution,
up/downsampling and the fused LSTM act along the last axis so batches ride
on leading axes.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgumentError
from .engine import Node, Tape


def _promote(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(np.asarray(x, dtype=np.float64))


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise InvalidArgumentError("at least one argument must be a tape Node")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _promote(t, a), _promote(t, b)
    return t.record(
        a.value + b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
        "add",
    )


def subtract(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _promote(t, a), _promote(t, b)
    return t.record(
        a.value - b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(-g, b.value.shape),
        ),
        "subtract",
    )


def multiply(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _promote(t, a), _promote(t, b)
    return t.record(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
        "multiply",
    )


def divide(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _promote(t, a), _promote(t, b)
    return t.record(
        a.value / b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * a.value / b.value**2, b.value.shape),
        ),
        "divide",
    )


def matmul(a, b) -> Node:
    """Plain 2-D matrix product."""
    t = _tape_of(a, b)
    a, b = _promote(t, a), _promote(t, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise InvalidArgumentError("matmul expects 2-D operands; see affine")
    return t.record(
        a.value @ b.value,
        (a, b),
        (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
        "matmul",
    )


def affine(x, w, b) -> Node:
    """x @ w + b contracting the last axis of x; leading axes are batch."""
    t = _tape_of(x, w, b)
    x, w, b = _promote(t, x), _promote(t, w), _promote(t, b)
    n_in, n_out = w.value.shape

    def vjp_x(g):
        return g @ w.value.T

    def vjp_w(g):
        return x.value.reshape(-1, n_in).T @ g.reshape(-1, n_out)

    def vjp_b(g):
        return g.reshape(-1, n_out).sum(axis=0)

    return t.record(x.value @ w.value + b.value, (x, w, b), (vjp_x, vjp_w, vjp_b), "affine")


# ---------------------------------------------------------------------------
# convolution / sample-rate ops (last axis)
# ---------------------------------------------------------------------------


def _conv_same_rows(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    if x.ndim == 1:
        return np.convolve(x, k, mode="same")
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = np.convolve(flat[i], k, mode="same")
    return out.reshape(x.shape)


def conv1d(x, k) -> Node:
    """"Same"-mode convolution along the last axis (numpy centering)."""
    t = _tape_of(x, k)
    x, k = _promote(t, x), _promote(t, k)
    kv = k.value
    if kv.ndim != 1:
        raise InvalidArgumentError("conv1d kernel must be 1-D")
    n = x.value.shape[-1]
    m = kv.size
    if m > n:
        raise InvalidArgumentError("kernel longer than signal")
    s = (m - 1) // 2

    def vjp_x(g):
        gf = g.reshape(-1, n)
        out = np.empty_like(gf)
        rev = kv[::-1]
        for i in range(gf.shape[0]):
            full = np.convolve(gf[i], rev, mode="full")
            out[i] = full[m - 1 - s : m - 1 - s + n]
        return out.reshape(x.value.shape)

    def vjp_k(g):
        gf = g.reshape(-1, n)
        xf = x.value.reshape(-1, n)
        dk = np.zeros(m, dtype=np.float64)
        for i in range(gf.shape[0]):
            full = np.convolve(gf[i][::-1], xf[i], mode="full")
            dk += full[n + s - m : n + s][::-1]
        return dk

    return t.record(_conv_same_rows(x.value, kv), (x, k), (vjp_x, vjp_k), "conv1d")


def upsample(x, factor: int) -> Node:
    """Zero-stuff the last axis by an integer factor."""
    t = _tape_of(x)
    x = _promote(t, x)
    if factor < 1:
        raise InvalidArgumentError("factor must be >= 1")
    shape = x.value.shape[:-1] + (x.value.shape[-1] * factor,)
    out = np.zeros(shape, dtype=np.float64)
    out[..., ::factor] = x.value
    return t.record(out, (x,), (lambda g: g[..., ::factor],), f"upsample{factor}")


def downsample(x, factor: int, phase: int = 0) -> Node:
    """Take every ``factor``-th sample of the last axis starting at ``phase``."""
    t = _tape_of(x)
    x = _promote(t, x)
    if factor < 1:
        raise InvalidArgumentError("factor must be >= 1")
    if not 0 <= phase < factor:
        raise InvalidArgumentError("phase must lie in [0, factor)")

    def vjp(g):
        out = np.zeros_like(x.value)
        out[..., phase::factor] = g
        return out

    return t.record(x.value[..., phase::factor], (x,), (vjp,), f"downsample{factor}")


def crop(x, lo: int, hi: int) -> Node:
    """Slice [lo, hi) of the last axis; backward zero-pads."""
    t = _tape_of(x)
    x = _promote(t, x)
    n = x.value.shape[-1]
    if not (0 <= lo < hi <= n):
        raise InvalidArgumentError(f"bad crop window [{lo}, {hi}) for length {n}")

    def vjp(g):
        out = np.zeros_like(x.value)
        out[..., lo:hi] = g
        return out

    return t.record(x.value[..., lo:hi], (x,), (vjp,), "crop")


def expand_last(x) -> Node:
    """Append a trailing singleton axis."""
    t = _tape_of(x)
    x = _promote(t, x)
    return t.record(x.value[..., None], (x,), (lambda g: g[..., 0],), "expand_last")


def squeeze_last(x) -> Node:
    """Drop a trailing singleton axis."""
    t = _tape_of(x)
    x = _promote(t, x)
    if x.value.shape[-1] != 1:
        raise InvalidArgumentError("squeeze_last needs a trailing singleton axis")
    return t.record(x.value[..., 0], (x,), (lambda g: g[..., None],), "squeeze_last")


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Node:
    t = _tape_of(x)
    x = _promote(t, x)
    y = _sigmoid(x.value)
    return t.record(y, (x,), (lambda g: g * y * (1.0 - y),), "sigmoid")


def tanh(x) -> Node:
    t = _tape_of(x)
    x = _promote(t, x)
    y = np.tanh(x.value)
    return t.record(y, (x,), (lambda g: g * (1.0 - y * y),), "tanh")


def exp(x) -> Node:
    t = _tape_of(x)
    x = _promote(t, x)
    y = np.exp(x.value)
    return t.record(y, (x,), (lambda g: g * y,), "exp")


def log(x) -> Node:
    t = _tape_of(x)
    x = _promote(t, x)
    return t.record(np.log(x.value), (x,), (lambda g: g / x.value,), "log")


def square(x) -> Node:
    t = _tape_of(x)
    x = _promote(t, x)
    return t.record(x.value**2, (x,), (lambda g: 2.0 * g * x.value,), "square")


def sqrt(x) -> Node:
    t = _tape_of(x)
    x = _promote(t, x)
    y = np.sqrt(x.value)
    return t.record(y, (x,), (lambda g: 0.5 * g / y,), "sqrt")


def mean(x) -> Node:
    """Mean over all elements (scalar output)."""
    t = _tape_of(x)
    x = _promote(t, x)
    n = x.value.size

    def vjp(g):
        return np.full_like(x.value, float(g) / n)

    return t.record(np.mean(x.value), (x,), (vjp,), "mean")


def mean_last(x) -> Node:
    """Mean over the last axis, kept as a singleton (for broadcasting)."""
    t = _tape_of(x)
    x = _promote(t, x)
    n = x.value.shape[-1]

    def vjp(g):
        return np.broadcast_to(g / n, x.value.shape).copy()

    return t.record(x.value.mean(axis=-1, keepdims=True), (x,), (vjp,), "mean_last")


def reshape(x, shape) -> Node:
    """View the same elements under a new shape."""
    t = _tape_of(x)
    x = _promote(t, x)
    shape = tuple(shape)

    def vjp(g):
        return g.reshape(x.value.shape)

    return t.record(x.value.reshape(shape), (x,), (vjp,), "reshape")


# ---------------------------------------------------------------------------
# task-specific fused ops
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits, labels) -> Node:
    """Mean cross-entropy of softmax(logits) vs integer labels.

    ``logits`` has classes on the last axis; ``labels`` is an integer array
    matching the leading axes (not differentiated).
    """
    t = _tape_of(logits)
    logits = _promote(t, logits)
    lv = logits.value
    lab = np.asarray(labels)
    if lab.shape != lv.shape[:-1]:
        raise InvalidArgumentError("labels must match logits' leading axes")
    shifted = lv - lv.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=-1)) + lv.max(axis=-1)
    picked = np.take_along_axis(lv, lab[..., None], axis=-1)[..., 0]
    losses = logsumexp - picked
    n = losses.size

    def vjp(g):
        soft = np.exp(shifted)
        soft /= soft.sum(axis=-1, keepdims=True)
        onehot = np.zeros_like(lv)
        np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
        return (soft - onehot) * (float(g) / n)

    return t.record(losses.mean(), (logits,), (vjp,), "softmax_xent")


def range_sigmoid(theta, low: float, high: float) -> Node:
    """Map an unconstrained scalar smoothly into (low, high)."""
    t = _tape_of(theta)
    theta = _promote(t, theta)
    if not low < high:
        raise InvalidArgumentError("low must be < high")
    s = _sigmoid(theta.value)
    return t.record(
        low + (high - low) * s,
        (theta,),
        (lambda g: g * (high - low) * s * (1.0 - s),),
        "range_sigmoid",
    )


def add_noise(x, noise) -> Node:
    """Add a pre-sampled noise array treated as constant during backward."""
    t = _tape_of(x)
    x = _promote(t, x)
    nv = np.asarray(noise, dtype=np.float64)
    if nv.shape != x.value.shape:
        raise InvalidArgumentError("noise must match the signal shape")
    return t.record(x.value + nv, (x,), (lambda g: g,), "add_noise")


def with_conditioning(x, c1, c2) -> Node:
    """Stack (B, T) samples with two scalar conditioning features.

    Returns (B, T, 3): feature 0 is the signal, features 1 and 2 are the
    scalars broadcast along time.
    """
    t = _tape_of(x, c1, c2)
    x, c1, c2 = _promote(t, x), _promote(t, c1), _promote(t, c2)
    if x.value.ndim != 2 or c1.value.size != 1 or c2.value.size != 1:
        raise InvalidArgumentError("expected x (B,T) and scalar conditioning")
    B, T = x.value.shape
    out = np.empty((B, T, 3), dtype=np.float64)
    out[..., 0] = x.value
    out[..., 1] = c1.value.item()
    out[..., 2] = c2.value.item()
    return t.record(
        out,
        (x, c1, c2),
        (
            lambda g: g[..., 0],
            lambda g: np.asarray(g[..., 1].sum()).reshape(c1.value.shape),
            lambda g: np.asarray(g[..., 2].sum()).reshape(c2.value.shape),
        ),
        "with_conditioning",
    )


def lstm(x, w_ih, w_hh, b) -> Node:
    """Fused LSTM over (B, T, F) input; returns the hidden sequence (B, T, H).

    Gate blocks along the 4H axis are ordered [input, forget, cell, output].
    Initial state is zero. Backward is hand-rolled truncated BPTT over
    cached gate activations (numba kernels, time-major); all four parent
    gradients are computed in one sweep and memoized per upstream gradient.
    """
    from ._lstm_kernels import lstm_backward_kernel, lstm_forward_kernel

    t = _tape_of(x, w_ih, w_hh, b)
    x, w_ih, w_hh, b = (_promote(t, a) for a in (x, w_ih, w_hh, b))
    xv, wiv, whv, bv = x.value, w_ih.value, w_hh.value, b.value
    if xv.ndim != 3:
        raise InvalidArgumentError("lstm input must be (B, T, F)")
    B, T, F = xv.shape
    H = whv.shape[0]
    if wiv.shape != (F, 4 * H) or whv.shape != (H, 4 * H) or bv.shape != (4 * H,):
        raise InvalidArgumentError("weight shapes must be (F,4H), (H,4H), (4H,)")

    x_tm = np.ascontiguousarray(np.swapaxes(xv, 0, 1))  # (T,B,F)
    x_proj = (x_tm.reshape(-1, F) @ wiv).reshape(T, B, 4 * H)
    gates, cells, tanh_c, hidden = lstm_forward_kernel(
        x_proj, np.ascontiguousarray(whv), np.ascontiguousarray(bv)
    )

    memo = {}

    def _backward(g):
        key = id(g)
        if key in memo:
            return memo[key]
        g_tm = np.ascontiguousarray(np.swapaxes(g, 0, 1))  # (T,B,H)
        dz_all, dwh, db = lstm_backward_kernel(
            g_tm, gates, cells, tanh_c, hidden, np.ascontiguousarray(whv)
        )
        dz_flat = dz_all.reshape(-1, 4 * H)
        dwi = x_tm.reshape(-1, F).T @ dz_flat
        dx = np.swapaxes((dz_flat @ wiv.T).reshape(T, B, F), 0, 1).copy()
        memo.clear()
        memo[key] = (dx, dwi, dwh, db)
        return memo[key]

    return t.record(
        np.swapaxes(hidden, 0, 1).copy(),
        (x, w_ih, w_hh, b),
        (
            lambda g: _backward(g)[0],
            lambda g: _backward(g)[1],
            lambda g: _backward(g)[2],
            lambda g: _backward(g)[3],
        ),
        "lstm",
    )


# operator sugar on Node
Node.__add__ = lambda self, other: add(self, other)
Node.__radd__ = lambda self, other: add(self, other)
Node.__sub__ = lambda self, other: subtract(self, other)
Node.__rsub__ = lambda self, other: subtract(_promote(self.tape, other), self)
Node.__mul__ = lambda self, other: multiply(self, other)
Node.__rmul__ = lambda self, other: multiply(self, other)
Node.__truediv__ = lambda self, other: divide(self, other)
Node.__rtruediv__ = lambda self, other: divide(_promote(self.tape, other), self)
Node.__neg__ = lambda self: multiply(self, -1.0)
