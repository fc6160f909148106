"""Voxel coordinate management for sparse tensors.

Coordinates are rows ``(batch, i, j, k)`` of an ``(N, 4)`` int64 array. Each
row packs into a single int64 key preserving lexicographic order, which gives
hash-map behaviour through one sorted array plus binary search. All tensors
in this package keep their rows in ascending key order, so row order (and
everything computed from it) is reproducible bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from sparseloc import backend
from sparseloc.errors import EmptyCloud, MissingSkip, NonFinite, StrideMismatch

# 16 bits per field: batch in [0, 32767], i/j/k in [-32768, 32767].
_KEY_BIAS = 1 << 15
_COORD_MIN = -_KEY_BIAS
_COORD_MAX = _KEY_BIAS - 1


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Pack (N, 4) batch/i/j/k rows into order-preserving int64 keys."""
    c = np.asarray(coords, dtype=np.int64)
    if c.ndim != 2 or c.shape[1] != 4:
        raise ValueError(f"coords must be (N, 4), got {c.shape}")
    if c.size:
        if c[:, 0].min() < 0 or c[:, 0].max() > _COORD_MAX:
            raise ValueError("batch index out of packable range")
        if c[:, 1:].min() < _COORD_MIN or c[:, 1:].max() > _COORD_MAX:
            raise ValueError("voxel index out of packable range")
    return (
        (c[:, 0] << 48)
        | ((c[:, 1] + _KEY_BIAS) << 32)
        | ((c[:, 2] + _KEY_BIAS) << 16)
        | (c[:, 3] + _KEY_BIAS)
    )


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    out = np.empty((len(k), 4), dtype=np.int64)
    out[:, 0] = k >> 48
    out[:, 1] = ((k >> 32) & 0xFFFF) - _KEY_BIAS
    out[:, 2] = ((k >> 16) & 0xFFFF) - _KEY_BIAS
    out[:, 3] = (k & 0xFFFF) - _KEY_BIAS
    return out


@dataclass(frozen=True)
class SparseTensor:
    """Features on occupied voxel coordinates at a given stride.

    Rows are ordered by ascending packed key, i.e. lexicographic in
    (batch, i, j, k); `keys` doubles as the coordinate-to-row index.
    """

    coords: np.ndarray  # (N, 4) int64, rows (batch, i, j, k)
    features: np.ndarray  # (N, C) float64
    stride: int
    keys: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError("features must be (N, C) matching coords")
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise ValueError(f"stride must be a positive power of two, got {self.stride}")
        if coords.size and np.any(coords[:, 1:] % self.stride):
            raise ValueError("coordinates not divisible by stride")
        keys = pack_keys(coords)
        if len(keys) > 1 and np.any(np.diff(keys) <= 0):
            raise ValueError("coords must be unique and in ascending (batch,i,j,k) order")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "keys", keys)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        """Same support, new feature matrix."""
        return SparseTensor(self.coords, features, self.stride)

    def find_rows(self, coords: np.ndarray) -> np.ndarray:
        """Row index per queried coordinate, -1 where absent."""
        return backend.kernels().lookup_rows(self.keys, pack_keys(coords))


@dataclass(frozen=True)
class KernelMap:
    """Per-offset (input_row, output_row) pairs realizing a convolution.

    `pairs_in[splits[k]:splits[k+1]]` and the matching `pairs_out` slice hold
    the pairs of offset `offsets[k]`, ordered by ascending output row. Within
    one offset each input row and each output row occurs at most once.
    """

    offsets: np.ndarray  # (K, 3) int64
    pairs_in: np.ndarray  # (P,) int64
    pairs_out: np.ndarray  # (P,) int64
    splits: np.ndarray  # (K + 1,) int64

    @property
    def n_pairs(self) -> int:
        return int(self.splits[-1])

    def pairs_for_offset(self, k: int):
        s, e = self.splits[k], self.splits[k + 1]
        return self.pairs_in[s:e], self.pairs_out[s:e]


def voxelize(cloud: np.ndarray, cell: float, batch: int = 0) -> SparseTensor:
    """Quantize an (N, 3) point cloud onto a voxel grid at stride 1.

    Duplicate points collapse; features start as a single all-ones channel.
    Output rows follow ascending (batch, i, j, k) order, so the result is
    invariant to any permutation of the input points.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"cloud must be (N, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise EmptyCloud("point cloud has no points")
    if not np.all(np.isfinite(pts)):
        raise NonFinite("point cloud contains NaN or Inf")
    if cell <= 0:
        raise ValueError(f"cell must be positive, got {cell}")
    idx = np.floor(pts / cell).astype(np.int64)
    coords = np.empty((len(idx), 4), dtype=np.int64)
    coords[:, 0] = batch
    coords[:, 1:] = idx
    keys = np.unique(pack_keys(coords))
    uniq = unpack_keys(keys)
    feats = np.ones((len(uniq), 1), dtype=np.float64)
    return SparseTensor(uniq, feats, stride=1)


def _build_pairs(in_keys: np.ndarray, out_coords: np.ndarray, offsets: np.ndarray, step: int):
    """Pairs (n_in, n_out) with coord(n_out) + step*offset == coord(n_in)."""
    kmod = backend.kernels()
    n_off = len(offsets)
    per_in, per_out = [], []
    splits = np.zeros(n_off + 1, dtype=np.int64)
    target = np.empty_like(out_coords)
    target[:, 0] = out_coords[:, 0]
    for k in range(n_off):
        target[:, 1:] = out_coords[:, 1:] + step * offsets[k]
        rows = kmod.lookup_rows(in_keys, pack_keys(target))
        hit = rows >= 0
        per_in.append(rows[hit])
        per_out.append(np.nonzero(hit)[0].astype(np.int64))
        splits[k + 1] = splits[k] + len(per_in[-1])
    pairs_in = np.concatenate(per_in) if per_in else np.empty(0, dtype=np.int64)
    pairs_out = np.concatenate(per_out) if per_out else np.empty(0, dtype=np.int64)
    return KernelMap(
        offsets=np.asarray(offsets, dtype=np.int64),
        pairs_in=pairs_in.astype(np.int64),
        pairs_out=pairs_out.astype(np.int64),
        splits=splits,
    )


def build_kernel_map(
    tensor: SparseTensor,
    out_coords: np.ndarray,
    offsets: np.ndarray,
    dilation: int = 1,
) -> KernelMap:
    """Kernel map from `tensor` onto `out_coords`.

    A pair (n_in, n_out) exists for offset o iff
    ``coord(n_out) + dilation * stride * o == coord(n_in)``. Pairs are stored
    per offset in ascending output-row order.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    out_coords = np.asarray(out_coords, dtype=np.int64)
    if out_coords.size and np.any(out_coords[:, 1:] % tensor.stride):
        raise StrideMismatch(
            f"output coordinates not aligned to input stride {tensor.stride}"
        )
    return _build_pairs(tensor.keys, out_coords, np.asarray(offsets, dtype=np.int64),
                        step=dilation * tensor.stride)


def downsample_coords(tensor: SparseTensor) -> np.ndarray:
    """Coordinate set at doubled stride: floor-quantize each coord to 2*stride."""
    step = 2 * tensor.stride
    coarse = tensor.coords.copy()
    coarse[:, 1:] = (coarse[:, 1:] // step) * step  # // floors toward -inf
    keys = np.unique(pack_keys(coarse))
    return unpack_keys(keys)


def upsample_coords(low: SparseTensor, recorded: dict) -> np.ndarray:
    """Recorded encoder coordinate set at stride low.stride // 2.

    `recorded` maps stride -> coordinate array captured during the encoder
    pass; the decoder restores that exact support.
    """
    target_stride = low.stride // 2
    if target_stride < 1 or target_stride not in recorded:
        raise MissingSkip(f"no recorded coordinate set at stride {target_stride}")
    return recorded[target_stride]
