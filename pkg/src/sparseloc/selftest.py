"""Built-in verification suites behind `sparseloc selftest`.

Five suites: kernel-decomposition equivalence, gradient certification,
gating invariants, pooling limits, and the retrieval protocol, plus the
parameter-reduction check. Prints one line per suite with timing; returns
False naming the first failing property.
"""

import time

import numpy as np

from sparseloc import autodiff as ad
from sparseloc import ops
from sparseloc.model import ModelConfig, parameter_count
from sparseloc.retrieval import DbEntry, DescriptorDB, evaluate, mine_pairs
from sparseloc.sparse import SparseTensor

from itertools import product


def dense_cube_tensor(rng, size: int, channels: int) -> SparseTensor:
    coords = np.array([(0, i, j, k) for i, j, k in product(range(size), repeat=3)],
                      dtype=np.int64)
    feats = rng.uniform(-1.0, 1.0, (len(coords), channels))
    return SparseTensor(coords, feats, stride=1)


def interior_mask(coords: np.ndarray, reach: int) -> np.ndarray:
    lo = coords[:, 1:].min(axis=0) + reach
    hi = coords[:, 1:].max(axis=0) - reach
    return np.all((coords[:, 1:] >= lo) & (coords[:, 1:] <= hi), axis=1)


def rank1_pair(rng, channels: int):
    """Axis kernels whose composition equals a dense kernel with every
    channel-pair slice proportional to one rank-1 cube."""
    kx, ky, kz = (rng.uniform(-1.0, 1.0, 3) for _ in range(3))
    mix = rng.uniform(-1.0, 1.0, (channels, channels))
    cube = ops.rank1_reconstruct(kx, ky, kz)
    dense = np.einsum("io,abc->iabco", mix, cube)
    eye = np.eye(channels)
    ax = ops.AsymmetricKernel("x", np.einsum("io,a->iao", mix, kx))
    ay = ops.AsymmetricKernel("y", np.einsum("io,a->iao", eye, ky))
    az = ops.AsymmetricKernel("z", np.einsum("io,a->iao", eye, kz))
    return (ax, ay, az), ops.ConvKernel(dense)


def suite_decomposition(rng, n_kernels: int = 10, size: int = 5,
                        tol: float = 1e-10) -> str:
    for trial in range(n_kernels):
        channels = int(rng.integers(1, 9))
        x = dense_cube_tensor(rng, size, channels)
        (ax, ay, az), dense = rank1_pair(rng, channels)
        composed = ops.axis_conv(ops.axis_conv(ops.axis_conv(x, ax), ay), az)
        direct = ops.sparse_conv(x, dense)
        inner = interior_mask(x.coords, 1)
        diff = np.abs(composed.features[inner] - direct.features[inner]).max()
        if diff >= tol:
            return f"decomposition equivalence (trial {trial}, max diff {diff:.2e})"
    return ""


def _gradcheck_cases(rng):
    support = dense_cube_tensor(rng, 2, 2)
    kmap, coords, _ = ops.conv_kernel_map(support, ops.ConvKernel(np.zeros((2, 3, 3, 3, 3))))
    feats = rng.uniform(-1.0, 1.0, (support.n, 2))
    taps = rng.uniform(-1.0, 1.0, (27, 2, 3))
    proj = rng.uniform(-1.0, 1.0, (len(coords), 3))

    def build_conv(tape, nodes):
        y = ad.conv_op(tape, nodes[0], nodes[1], None, kmap, len(coords))
        return ad.dot_sum_op(tape, y, proj)

    x5 = rng.uniform(-1.0, 1.0, (5, 4))
    w_lin = rng.uniform(-1.0, 1.0, (4, 3))
    b_lin = rng.uniform(-1.0, 1.0, 3)
    proj5 = rng.uniform(-1.0, 1.0, (5, 3))

    def build_linear(tape, nodes):
        return ad.dot_sum_op(tape, ad.linear_op(tape, *nodes), proj5)

    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.uniform(-0.5, 0.5, 4)
    mean = rng.uniform(-0.2, 0.2, 4)
    var = rng.uniform(0.5, 1.5, 4)
    proj44 = rng.uniform(-1.0, 1.0, (6, 4))
    x6 = rng.uniform(-1.0, 1.0, (6, 4))

    def build_norm(tape, nodes):
        y = ad.norm_affine_op(tape, nodes[0], nodes[1], nodes[2], mean, var,
                              1e-5, "relu")
        return ad.dot_sum_op(tape, y, proj44)

    def build_batchnorm(tape, nodes):
        y, _, _ = ad.batchnorm_op(tape, nodes[0], nodes[1], nodes[2], 1e-5, "relu")
        return ad.dot_sum_op(tape, y, proj44)

    w1 = rng.uniform(-1.0, 1.0, (4, 4))
    b1 = rng.uniform(-0.5, 0.5, 4)
    w2 = rng.uniform(-1.0, 1.0, 4)
    b2 = np.asarray(0.1)

    def build_point_gate(tape, nodes):
        y, _ = ad.point_gate_op(tape, *nodes)
        return ad.dot_sum_op(tape, y, proj44)

    wc = rng.uniform(-1.0, 1.0, (4, 4))
    bc = rng.uniform(-0.5, 0.5, 4)

    def build_channel_gate(tape, nodes):
        y, _ = ad.channel_gate_op(tape, *nodes)
        return ad.dot_sum_op(tape, y, proj44)

    projc = rng.uniform(-1.0, 1.0, 4)
    xpos = rng.uniform(0.1, 1.0, (6, 4))

    def build_gem(tape, nodes):
        return ad.dot_sum_op(tape, ad.gem_op(tape, nodes[0], nodes[1], 1e-6), projc)

    ga = rng.uniform(-1.0, 1.0, 8)
    gp = rng.uniform(-1.0, 1.0, 8)
    gn = rng.uniform(-1.0, 1.0, 8)

    def build_triplet(tape, nodes):
        return ad.triplet_op(tape, nodes[0], nodes[1], nodes[2], 2.0)

    return [
        ("conv", build_conv, [feats, taps]),
        ("linear", build_linear, [x5, w_lin, b_lin]),
        ("norm_affine", build_norm, [x6, gamma, beta]),
        ("batchnorm", build_batchnorm, [x6, gamma, beta]),
        ("point_gate", build_point_gate, [x6, w1, b1, w2, b2]),
        ("channel_gate", build_channel_gate, [x6, wc, bc]),
        ("gem", build_gem, [xpos, np.asarray(3.0)]),
        ("triplet", build_triplet, [ga, gp, gn]),
    ]


def suite_gradcheck(rng, tolerance: float = 1e-4) -> str:
    for name, build, inputs in _gradcheck_cases(rng):
        report = ad.gradcheck(build, inputs, tolerance=tolerance)
        if not report.passed:
            return f"gradcheck: {name} (max rel err {report.max_rel_err:.2e})"
    return ""


def suite_gating(rng, trials: int = 200) -> str:
    from sparseloc import gating

    for trial in range(trials):
        n = int(rng.integers(1, 12))
        c = int(rng.integers(1, 9))
        feats = rng.uniform(-1.0, 1.0, (n, c))
        coords = np.array([(0, i, 0, 0) for i in range(n)], dtype=np.int64)
        x = SparseTensor(coords, feats, stride=1)
        pg = gating.PointGateParams(rng.normal(0, 1, (c, c)), rng.normal(0, 1, c),
                                    rng.normal(0, 1, c), float(rng.normal()))
        out, s = gating.point_gate(x, pg)
        if np.any((s <= 0.0) | (s >= 1.0)):
            return "gating: point gate score outside (0, 1)"
        if np.abs(out.features - feats * s[:, None]).max() != 0.0:
            return "gating: point gate is not a per-row rescale"
        cg = gating.ChannelGateParams(rng.normal(0, 1, (c, c)), rng.normal(0, 1, c))
        outc, sc = gating.channel_gate(x, cg)
        if np.any(np.abs(outc.features) > np.abs(feats)):
            return "gating: channel gate amplified a feature"
        ratio = np.abs(outc.features - feats * sc[None, :]).max()
        if ratio > 1e-12:
            return "gating: channel scale not shared across rows"
    return ""


def suite_gem(rng, trials: int = 100) -> str:
    for _ in range(trials):
        n = int(rng.integers(1, 16))
        c = int(rng.integers(1, 6))
        feats = rng.uniform(0.01, 1.0, (n, c))
        coords = np.array([(0, i, 0, 0) for i in range(n)], dtype=np.int64)
        x = SparseTensor(coords, feats, stride=1)
        g1 = ops.gem_pool(x, ops.PoolingParams(p=1.0))
        if not np.array_equal(g1, np.mean(np.sort(feats, axis=0), axis=0)):
            return "gem: p=1 is not the exact mean"
        g100 = ops.gem_pool(x, ops.PoolingParams(p=100.0))
        ref = feats.max(axis=0)
        if np.any(np.abs(g100 - ref) > 0.03 * ref):
            return "gem: p=100 is not within 3% of the max"
        perm = rng.permutation(n)
        xp = SparseTensor(coords, feats[perm], stride=1)
        if not np.array_equal(ops.gem_pool(xp, ops.PoolingParams(p=3.0)),
                              ops.gem_pool(x, ops.PoolingParams(p=3.0))):
            return "gem: row permutation changed the descriptor"
    return ""


def suite_protocol(rng, catalogs: int = 20) -> str:
    # four entries on a 100 m line; the query sits 10 m from the first
    db = DescriptorDB()
    for i, pos in enumerate((0.0, 30.0, 60.0, 90.0)):
        db.add(DbEntry(f"e{i}", pos, 0.0, np.array([float(i)])))
    report = evaluate([(np.array([0.1]), 10.0, 0.0),
                       (np.array([2.05]), 10.0, 0.0)], db, radius=25.0)
    if (report.ar_at_1, report.ar_at_1pct) != (50.0, 50.0):
        return f"protocol: hand scenario gave {report.ar_at_1}/{report.ar_at_1pct}"

    for _ in range(catalogs):
        n = int(rng.integers(2, 30))
        catalog = [(f"c{i}", float(rng.uniform(0, 120)), float(rng.uniform(0, 120)))
                   for i in range(n)]
        pos_pairs, neg_pairs = mine_pairs(catalog)
        brute_pos, brute_neg = [], []
        for i in range(n):
            for j in range(i + 1, n):
                d = np.hypot(catalog[i][1] - catalog[j][1],
                             catalog[i][2] - catalog[j][2])
                pair = tuple(sorted((catalog[i][0], catalog[j][0])))
                if d < 10.0:
                    brute_pos.append(pair)
                elif d > 50.0:
                    brute_neg.append(pair)
        if sorted(brute_pos) != pos_pairs or sorted(brute_neg) != neg_pairs:
            return "protocol: mined pairs disagree with the exhaustive scan"
    return ""


def suite_parameters() -> str:
    report = parameter_count(ModelConfig.desk())
    pct = report.reduction_percent
    if abs(pct - 100.0 * 2.0 / 3.0) > 1e-9:
        return f"parameters: reduction {pct:.4f}% is not 66.67%"
    print(f"  parameter-reduction check: {pct:.2f}% fewer weights per factorized core")
    return ""


def run_selftest(corrupt_backward=None) -> bool:
    if corrupt_backward:
        ad.set_corrupt_backward(corrupt_backward)
    suites = [
        ("decomposition-equivalence", lambda r: suite_decomposition(r)),
        ("gradcheck", lambda r: suite_gradcheck(r)),
        ("gating-invariants", lambda r: suite_gating(r)),
        ("gem-limits", lambda r: suite_gem(r)),
        ("protocol", lambda r: suite_protocol(r)),
        ("parameter-reduction", lambda r: suite_parameters()),
    ]
    ok = True
    try:
        for name, fn in suites:
            rng = np.random.default_rng(20240601)
            t0 = time.time()
            failure = fn(rng)
            dt = time.time() - t0
            if failure:
                print(f"[FAIL] {name} ({dt:.2f}s): {failure}")
                ok = False
                break
            print(f"[ ok ] {name} ({dt:.2f}s)")
    finally:
        if corrupt_backward:
            ad.set_corrupt_backward(None)
    return ok
