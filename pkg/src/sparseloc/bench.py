"""Axis-factorized vs dense convolution benchmark.

Runs both formulations on a dense cubic support, asserts they agree on the
interior before any timing, then reports median wall time, weight counts and
kernel-map pair counts per (mode, backend) combination.
"""

import time
from itertools import product

import numpy as np

from sparseloc import backend, ops
from sparseloc.sparse import SparseTensor, build_kernel_map


def _cube(rng, size: int, channels: int) -> SparseTensor:
    coords = np.array([(0, i, j, k) for i, j, k in product(range(size), repeat=3)],
                      dtype=np.int64)
    return SparseTensor(coords, rng.uniform(-1.0, 1.0, (len(coords), channels)), 1)


def _interior(coords: np.ndarray) -> np.ndarray:
    lo = coords[:, 1:].min(axis=0) + 1
    hi = coords[:, 1:].max(axis=0) - 1
    return np.all((coords[:, 1:] >= lo) & (coords[:, 1:] <= hi), axis=1)


def bench_grid(modes, backends, size: int, channels: int, reps: int,
               corrupt: bool = False, tol: float = 1e-9):
    """Rows (mode, backend, size, channels, reps, median_ms, weights, pairs,
    ratio) and a bool correctness gate."""
    rng = np.random.default_rng(99)
    x = _cube(rng, size, channels)
    axis_kernels = [
        ops.AsymmetricKernel(ax, rng.uniform(-1.0, 1.0, (channels, 3, channels)))
        for ax in ("x", "y", "z")
    ]
    # dense kernel equal to the composition: contract intermediate channels
    dense_w = np.einsum("iam,mbn,nco->iabco", axis_kernels[0].taps,
                        axis_kernels[1].taps, axis_kernels[2].taps)
    if corrupt:
        dense_w = dense_w + 1e-6
    dense = ops.ConvKernel(dense_w)

    def run_asym():
        out = x
        for k in axis_kernels:
            out = ops.axis_conv(out, k)
        return out

    def run_dense():
        return ops.sparse_conv(x, dense)

    inner = _interior(x.coords)
    gate = bool(
        np.abs(run_asym().features[inner] - run_dense().features[inner]).max() < tol
    )
    if not gate:
        return [], False

    asym_weights = 3 * 3 * channels * channels
    dense_weights = 27 * channels * channels
    axis_pairs = sum(
        build_kernel_map(x, x.coords, ops.axis_offsets(k.axis, 3)).n_pairs
        for k in axis_kernels
    )
    dense_pairs = build_kernel_map(x, x.coords, ops.cube_offsets(3)).n_pairs

    restore = backend.active_backend()
    rows = []
    try:
        for mode in modes:
            fn = run_asym if mode == "asym" else run_dense
            weights = asym_weights if mode == "asym" else dense_weights
            pairs = axis_pairs if mode == "asym" else dense_pairs
            for bk in backends:
                backend.set_backend(bk)
                fn()  # warm the jit before timing
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    fn()
                    times.append((time.perf_counter() - t0) * 1000.0)
                rows.append((
                    mode, bk, size, channels, reps,
                    f"{float(np.median(times)):.3f}", weights, pairs,
                    f"{asym_weights / dense_weights:.4f}" if mode == "asym" else "1.0000",
                ))
    finally:
        backend.set_backend(restore)
    return rows, True
