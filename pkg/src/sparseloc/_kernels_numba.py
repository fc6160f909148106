"""Numba-jitted hot kernels.

Contracts match `_kernels_numpy`. Loops accumulate in a fixed order (offsets
in declared order, pairs in stored order, channels ascending) so outputs are
reproducible run to run regardless of the numba thread setting.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def lookup_rows(sorted_keys, query_keys):
    n = sorted_keys.shape[0]
    out = np.empty(query_keys.shape[0], dtype=np.int64)
    for t in range(query_keys.shape[0]):
        q = query_keys[t]
        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) // 2
            if sorted_keys[mid] < q:
                lo = mid + 1
            else:
                hi = mid
        if lo < n and sorted_keys[lo] == q:
            out[t] = lo
        else:
            out[t] = -1
    return out


@njit(cache=True)
def conv_forward(feats, w, pin, pout, splits, n_out):
    ci_n = w.shape[1]
    co_n = w.shape[2]
    out = np.zeros((n_out, co_n), dtype=np.float64)
    for k in range(w.shape[0]):
        wk = w[k]
        for t in range(splits[k], splits[k + 1]):
            xn = feats[pin[t]]
            ym = out[pout[t]]
            for ci in range(ci_n):
                v = xn[ci]
                if v != 0.0:
                    for co in range(co_n):
                        ym[co] += v * wk[ci, co]
    return out


@njit(cache=True)
def conv_backward_feats(gy, w, pin, pout, splits, n_in):
    ci_n = w.shape[1]
    co_n = w.shape[2]
    gx = np.zeros((n_in, ci_n), dtype=np.float64)
    for k in range(w.shape[0]):
        wk = w[k]
        for t in range(splits[k], splits[k + 1]):
            gm = gy[pout[t]]
            gn = gx[pin[t]]
            for ci in range(ci_n):
                acc = 0.0
                for co in range(co_n):
                    acc += gm[co] * wk[ci, co]
                gn[ci] += acc
    return gx


@njit(cache=True)
def conv_backward_weights(feats, gy, pin, pout, splits, n_taps):
    ci_n = feats.shape[1]
    co_n = gy.shape[1]
    gw = np.zeros((n_taps, ci_n, co_n), dtype=np.float64)
    for k in range(n_taps):
        gwk = gw[k]
        for t in range(splits[k], splits[k + 1]):
            xn = feats[pin[t]]
            gm = gy[pout[t]]
            for ci in range(ci_n):
                v = xn[ci]
                if v != 0.0:
                    for co in range(co_n):
                        gwk[ci, co] += v * gm[co]
    return gw
