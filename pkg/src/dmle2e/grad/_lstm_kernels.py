"""Numba-compiled LSTM forward / BPTT inner loops.

Time-major (T, B, *) layout so per-step slices are contiguous. The ops.lstm
wrapper owns the tape bookkeeping; these kernels are pure array math.

The gate nonlinearities use a polynomial exp (two-part ln2 argument
reduction + degree-11 Taylor, ~1e-14 relative error): libm calls dominate
the runtime otherwise and LLVM cannot vectorize them here. Backward uses
the cached gate values, so forward/backward stay exactly consistent.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_LOG2E = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10


@njit(inline="always", cache=True)
def _exp(x):
    if x < -708.0:
        return 0.0
    if x > 708.0:
        return math.inf
    k = math.floor(x * _LOG2E + 0.5)
    r = (x - k * _LN2_HI) - k * _LN2_LO
    # Horner with inverse-factorial coefficients (division stalls the loop)
    p = 2.08767569878681e-09      # 1/12!
    p = p * r + 2.505210838544172e-08   # 1/11!
    p = p * r + 2.755731922398589e-07   # 1/10!
    p = p * r + 2.7557319223985893e-06  # 1/9!
    p = p * r + 2.48015873015873e-05    # 1/8!
    p = p * r + 1.984126984126984e-04   # 1/7!
    p = p * r + 1.388888888888889e-03   # 1/6!
    p = p * r + 8.333333333333333e-03   # 1/5!
    p = p * r + 4.166666666666666e-02   # 1/4!
    p = p * r + 1.666666666666667e-01   # 1/3!
    p = p * r + 0.5
    p = p * r + 1.0
    p = p * r + 1.0
    return math.ldexp(p, np.int64(k))


@njit(inline="always", cache=True)
def _sigmoid_s(x):
    if x >= 0.0:
        return 1.0 / (1.0 + _exp(-x))
    e = _exp(x)
    return e / (1.0 + e)


@njit(inline="always", cache=True)
def _tanh_s(x):
    if x >= 0.0:
        e = _exp(-2.0 * x)
        return (1.0 - e) / (1.0 + e)
    e = _exp(2.0 * x)
    return (e - 1.0) / (e + 1.0)


@njit(cache=True)
def lstm_forward_kernel(x_proj, w_hh, b):
    """x_proj (T,B,4H) = x@W_ih precomputed; returns gate/state caches.

    Gate order along the 4H axis: [input, forget, cell, output].
    """
    T, B, H4 = x_proj.shape
    H = H4 // 4
    gates = np.empty((T, B, H4))
    cells = np.empty((T, B, H))
    tanh_c = np.empty((T, B, H))
    hidden = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = np.dot(h, w_hh)
        for bi in range(B):
            for j in range(H):
                zi = x_proj[t, bi, j] + z[bi, j] + b[j]
                zf = x_proj[t, bi, H + j] + z[bi, H + j] + b[H + j]
                zg = x_proj[t, bi, 2 * H + j] + z[bi, 2 * H + j] + b[2 * H + j]
                zo = x_proj[t, bi, 3 * H + j] + z[bi, 3 * H + j] + b[3 * H + j]
                gi = _sigmoid_s(zi)
                gf = _sigmoid_s(zf)
                gg = _tanh_s(zg)
                go = _sigmoid_s(zo)
                cv = gf * c[bi, j] + gi * gg
                tc = _tanh_s(cv)
                hv = go * tc
                gates[t, bi, j] = gi
                gates[t, bi, H + j] = gf
                gates[t, bi, 2 * H + j] = gg
                gates[t, bi, 3 * H + j] = go
                cells[t, bi, j] = cv
                tanh_c[t, bi, j] = tc
                hidden[t, bi, j] = hv
                c[bi, j] = cv
                h[bi, j] = hv
    return gates, cells, tanh_c, hidden


@njit(cache=True)
def lstm_backward_kernel(g, gates, cells, tanh_c, hidden, w_hh):
    """Reverse sweep: upstream (T,B,H) -> (dz_all (T,B,4H), dW_hh, db)."""
    T, B, H = hidden.shape
    H4 = 4 * H
    dz_all = np.empty((T, B, H4))
    dwh = np.zeros((H, H4))
    db = np.zeros(H4)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    w_hh_t = np.ascontiguousarray(w_hh.T)
    for t in range(T - 1, -1, -1):
        dz = dz_all[t]
        for bi in range(B):
            for j in range(H):
                gi = gates[t, bi, j]
                gf = gates[t, bi, H + j]
                gg = gates[t, bi, 2 * H + j]
                go = gates[t, bi, 3 * H + j]
                tc = tanh_c[t, bi, j]
                c_prev = cells[t - 1, bi, j] if t > 0 else 0.0
                dh_tot = g[t, bi, j] + dh[bi, j]
                do = dh_tot * tc
                dcv = dc[bi, j] + dh_tot * go * (1.0 - tc * tc)
                di = dcv * gg
                dgg = dcv * gi
                df = dcv * c_prev
                dc[bi, j] = dcv * gf
                dz[bi, j] = di * gi * (1.0 - gi)
                dz[bi, H + j] = df * gf * (1.0 - gf)
                dz[bi, 2 * H + j] = dgg * (1.0 - gg * gg)
                dz[bi, 3 * H + j] = do * go * (1.0 - go)
        if t > 0:
            h_prev_t = np.ascontiguousarray(hidden[t - 1].T)  # (H,B)
            dwh += np.dot(h_prev_t, dz)
        for j in range(H4):
            acc = 0.0
            for bi in range(B):
                acc += dz[bi, j]
            db[j] += acc
        dh = np.dot(dz, w_hh_t)
    return dz_all, dwh, db
