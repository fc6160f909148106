"""Core numeric layers over sparse tensors.

Forward rules live here together with their analytic backward counterparts
(`conv_grad_*`, `gem_grads`, ...) so the training tape and the inference path
share one implementation of the math. Everything runs in float64; the hot
gather/scatter loops dispatch through `backend.kernels()`.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np

from sparseloc import backend
from sparseloc.errors import ChannelMismatch, EmptyTensor, StrideMismatch
from sparseloc.sparse import (
    KernelMap,
    SparseTensor,
    _build_pairs,
    build_kernel_map,
    downsample_coords,
)

AXES = ("x", "y", "z")


def cube_offsets(d: int) -> np.ndarray:
    """Centered d**3 tap offsets in fixed lexicographic order."""
    r = (d - 1) // 2
    return np.array(list(product(range(-r, d - r), repeat=3)), dtype=np.int64)


def axis_offsets(axis: str, d: int) -> np.ndarray:
    """d taps spaced along one axis through the center."""
    r = (d - 1) // 2
    out = np.zeros((d, 3), dtype=np.int64)
    out[:, AXES.index(axis)] = np.arange(-r, d - r)
    return out


DOWN_OFFSETS = np.array(list(product((0, 1), repeat=3)), dtype=np.int64)


@dataclass(frozen=True)
class ConvKernel:
    """Dense convolution weights (d_in, dx, dy, dz, d_out)."""

    weights: np.ndarray
    bias: np.ndarray = None
    dilation: int = 1
    stride_mode: str = "same"  # same | down2 | up2

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 5 or min(w.shape) < 1:
            raise ValueError(f"weights must be a 5D tensor, got shape {w.shape}")
        if self.stride_mode not in ("same", "down2", "up2"):
            raise ValueError(f"bad stride_mode {self.stride_mode!r}")
        if self.stride_mode == "same" and not (w.shape[1] == w.shape[2] == w.shape[3]):
            raise ValueError("same-mode kernels must be cubic")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[4]

    def flat_taps(self) -> np.ndarray:
        """(K, d_in, d_out) view matching the offset order of its kernel map."""
        w = self.weights
        k = w.shape[1] * w.shape[2] * w.shape[3]
        return np.ascontiguousarray(
            w.transpose(1, 2, 3, 0, 4).reshape(k, w.shape[0], w.shape[4])
        )


@dataclass(frozen=True)
class AsymmetricKernel:
    """1D taps (d_in, d, d_out) along a single axis, center-aligned."""

    axis: str
    taps: np.ndarray
    dilation: int = 1
    bias: np.ndarray = None

    def __post_init__(self):
        t = np.ascontiguousarray(self.taps, dtype=np.float64)
        if t.ndim != 3:
            raise ValueError(f"taps must be (d_in, d, d_out), got shape {t.shape}")
        if t.shape[1] % 2 == 0:
            raise ValueError("tap count must be odd (centered kernel)")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        object.__setattr__(self, "taps", t)
        if self.bias is not None:
            object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))

    @property
    def d_in(self) -> int:
        return self.taps.shape[0]

    @property
    def d_out(self) -> int:
        return self.taps.shape[2]

    def flat_taps(self) -> np.ndarray:
        return np.ascontiguousarray(self.taps.transpose(1, 0, 2))


@dataclass(frozen=True)
class NormAct:
    """Folded per-channel affine followed by an optional activation."""

    scale: np.ndarray
    shift: np.ndarray
    activation: str = "relu"  # relu | none

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        if not np.all(np.isfinite(s)) or np.any(s == 0.0):
            raise ValueError("scale must be finite and nonzero")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"bad activation {self.activation!r}")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=np.float64))


@dataclass(frozen=True)
class PoolingParams:
    """Generalized-mean pooling exponent and clamp."""

    p: float = 3.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


# -- convolution -------------------------------------------------------------


def conv_apply(feats: np.ndarray, taps: np.ndarray, bias, kmap: KernelMap,
               n_out: int) -> np.ndarray:
    """Apply flattened taps (K, d_in, d_out) through a kernel map."""
    out = backend.kernels().conv_forward(
        np.ascontiguousarray(feats, dtype=np.float64),
        np.ascontiguousarray(taps, dtype=np.float64),
        kmap.pairs_in, kmap.pairs_out, kmap.splits, n_out,
    )
    if bias is not None:
        out += bias
    return out


def conv_grad_feats(gy: np.ndarray, taps: np.ndarray, kmap: KernelMap,
                    n_in: int) -> np.ndarray:
    return backend.kernels().conv_backward_feats(
        np.ascontiguousarray(gy, dtype=np.float64),
        np.ascontiguousarray(taps, dtype=np.float64),
        kmap.pairs_in, kmap.pairs_out, kmap.splits, n_in,
    )


def conv_grad_taps(feats: np.ndarray, gy: np.ndarray, kmap: KernelMap) -> np.ndarray:
    return backend.kernels().conv_backward_weights(
        np.ascontiguousarray(feats, dtype=np.float64),
        np.ascontiguousarray(gy, dtype=np.float64),
        kmap.pairs_in, kmap.pairs_out, kmap.splits, len(kmap.offsets),
    )


def _conv_support(x: SparseTensor, k: ConvKernel, out_coords):
    """Resolve output coords, offsets and stride for a ConvKernel mode."""
    if k.stride_mode == "same":
        coords = x.coords if out_coords is None else np.asarray(out_coords, np.int64)
        offsets = cube_offsets(k.weights.shape[1])
        return coords, offsets, x.stride, k.dilation * x.stride
    if k.stride_mode == "down2":
        coords = downsample_coords(x) if out_coords is None else np.asarray(out_coords, np.int64)
        return coords, DOWN_OFFSETS, 2 * x.stride, x.stride
    # up2: transposed 2x2x2 conv; target support must be given.
    if out_coords is None:
        raise ValueError("up2 convolution requires explicit output coordinates")
    if x.stride < 2:
        raise StrideMismatch("up2 convolution needs input stride >= 2")
    coords = np.asarray(out_coords, dtype=np.int64)
    return coords, DOWN_OFFSETS, x.stride // 2, -(x.stride // 2)


def conv_kernel_map(x: SparseTensor, k: ConvKernel, out_coords=None):
    """Kernel map plus resolved (out_coords, out_stride) for `sparse_conv`."""
    coords, offsets, out_stride, step = _conv_support(x, k, out_coords)
    return _build_pairs(x.keys, coords, offsets, step), coords, out_stride


def sparse_conv(x: SparseTensor, k: ConvKernel, out_coords=None) -> SparseTensor:
    """Generic sparse convolution.

    Output rows with no matched inputs still receive the bias, so the support
    never shrinks inside the requested coordinate set.
    """
    if x.channels != k.d_in:
        raise ChannelMismatch(f"input has {x.channels} channels, kernel wants {k.d_in}")
    kmap, coords, out_stride = conv_kernel_map(x, k, out_coords)
    out = conv_apply(x.features, k.flat_taps(), k.bias, kmap, len(coords))
    return SparseTensor(coords, out, out_stride)


def axis_conv(x: SparseTensor, k: AsymmetricKernel) -> SparseTensor:
    """1D convolution along one axis on the unchanged support."""
    if x.channels != k.d_in:
        raise ChannelMismatch(f"input has {x.channels} channels, kernel wants {k.d_in}")
    kmap = build_kernel_map(x, x.coords, axis_offsets(k.axis, k.taps.shape[1]),
                            dilation=k.dilation)
    out = conv_apply(x.features, k.flat_taps(), k.bias, kmap, x.n)
    return x.with_features(out)


def rank1_reconstruct(kx: np.ndarray, ky: np.ndarray, kz: np.ndarray) -> np.ndarray:
    """Dense d*d*d kernel from three 1D tap vectors: out[a,b,c] = kx[a]*ky[b]*kz[c]."""
    kx, ky, kz = (np.asarray(v, dtype=np.float64).ravel() for v in (kx, ky, kz))
    if not (len(kx) == len(ky) == len(kz)):
        raise ValueError("tap vectors must have equal length")
    return np.einsum("a,b,c->abc", kx, ky, kz)


# -- pointwise layers --------------------------------------------------------


def norm_act(x: SparseTensor, na: NormAct) -> SparseTensor:
    """Per-row y = act(scale * x + shift) on the unchanged support."""
    if x.channels != len(na.scale):
        raise ChannelMismatch(f"{x.channels} channels vs {len(na.scale)} norm params")
    y = x.features * na.scale + na.shift
    if na.activation == "relu":
        y = np.maximum(y, 0.0)
    return x.with_features(y)


def channel_aligned_conv(x: SparseTensor, k: ConvKernel) -> SparseTensor:
    """1x1x1 convolution: a pure per-row linear map to a new channel width."""
    if k.weights.shape[1:4] != (1, 1, 1):
        raise ValueError("channel alignment requires 1x1x1 taps")
    if x.channels != k.d_in:
        raise ChannelMismatch(f"input has {x.channels} channels, kernel wants {k.d_in}")
    w = k.weights[:, 0, 0, 0, :]
    y = x.features @ w
    if k.bias is not None:
        y = y + k.bias
    return x.with_features(y)


# -- pooling -----------------------------------------------------------------


def gem_pool(x: SparseTensor, pp: PoolingParams) -> np.ndarray:
    """Generalized-mean pooling of all rows into one length-C descriptor."""
    if x.n == 0:
        raise EmptyTensor("cannot pool an empty tensor")
    g, _ = gem_forward(x.features, pp.p, pp.eps)
    return g


def gem_forward(feats: np.ndarray, p: float, eps: float):
    """Descriptor plus the saved context needed by `gem_grads`.

    Each channel is summed in sorted order, so the pooled value is invariant
    to row permutations bit for bit.
    """
    y = np.maximum(feats, eps)
    m = np.mean(np.sort(y, axis=0) ** p, axis=0)
    g = m ** (1.0 / p)
    return g, (m, g)


def gem_grads(gg: np.ndarray, feats: np.ndarray, p: float, eps: float, ctx):
    """Gradients of the pooled descriptor wrt the rows and the exponent."""
    m, g = ctx
    y = np.maximum(feats, eps)
    n = feats.shape[0]
    # dG_c/dx_nc = (1/N) * y^(p-1) * m^(1/p - 1), zero where the clamp is active
    coef = gg * (m ** (1.0 / p - 1.0)) / n
    gx = coef * y ** (p - 1.0)
    gx[feats < eps] = 0.0
    # dG_c/dp: G = m^(1/p), m = mean(y^p)
    logy = np.log(y)
    dm_dp = np.mean((y ** p) * logy, axis=0)
    dg_dp = g * (-np.log(m) / p**2 + dm_dp / (p * m))
    return gx, float(np.sum(gg * dg_dp))
