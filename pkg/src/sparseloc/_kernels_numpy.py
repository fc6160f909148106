"""Pure-numpy reference kernels.

Same contracts as `_kernels_numba`. Within one kernel offset every input row
and every output row occurs at most once (guaranteed by the kernel-map
builder), so plain fancy-index accumulation is safe; offsets are reduced
sequentially in their declared order, which keeps results deterministic.
"""

import numpy as np


def lookup_rows(sorted_keys, query_keys):
    """Row index of each query key in `sorted_keys`, or -1 when absent."""
    idx = np.searchsorted(sorted_keys, query_keys)
    idx_clipped = np.minimum(idx, len(sorted_keys) - 1) if len(sorted_keys) else idx
    if len(sorted_keys) == 0:
        return np.full(len(query_keys), -1, dtype=np.int64)
    hit = sorted_keys[idx_clipped] == query_keys
    hit &= idx < len(sorted_keys)
    out = np.where(hit, idx_clipped, -1)
    return out.astype(np.int64)


def conv_forward(feats, w, pin, pout, splits, n_out):
    """Gather-matmul-scatter convolution: out[m] += feats[n] @ w[k] per pair."""
    out = np.zeros((n_out, w.shape[2]), dtype=np.float64)
    for k in range(w.shape[0]):
        s, e = splits[k], splits[k + 1]
        if s == e:
            continue
        out[pout[s:e]] += feats[pin[s:e]] @ w[k]
    return out


def conv_backward_feats(gy, w, pin, pout, splits, n_in):
    gx = np.zeros((n_in, w.shape[1]), dtype=np.float64)
    for k in range(w.shape[0]):
        s, e = splits[k], splits[k + 1]
        if s == e:
            continue
        gx[pin[s:e]] += gy[pout[s:e]] @ w[k].T
    return gx


def conv_backward_weights(feats, gy, pin, pout, splits, n_taps):
    gw = np.zeros((n_taps, feats.shape[1], gy.shape[1]), dtype=np.float64)
    for k in range(n_taps):
        s, e = splits[k], splits[k + 1]
        if s == e:
            continue
        gw[k] = feats[pin[s:e]].T @ gy[pout[s:e]]
    return gw
