"""Point- and channel-wise sigmoid gating, and their configurable stacking.

A point gate rescales each row by a per-row scalar in (0, 1) computed from
that row alone; a channel gate rescales each channel by a shared scalar
computed from the row-mean context. Both shrink magnitudes elementwise and
never change the support. Forward helpers return the saved context used by
the matching `*_grads` backward rules.
"""

from dataclasses import dataclass

import numpy as np

from sparseloc.errors import ChannelMismatch, EmptyTensor
from sparseloc.sparse import SparseTensor


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class PointGateParams:
    """Two-layer perceptron C -> H -> 1 (relu between, sigmoid on top)."""

    w1: np.ndarray  # (C, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H,)
    b2: float

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64).ravel()
        b1 = np.asarray(self.b1, dtype=np.float64).ravel()
        if w1.ndim != 2 or w1.shape[1] != len(b1) or len(w2) != len(b1):
            raise ValueError("inconsistent point-gate perceptron shapes")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", float(self.b2))

    @property
    def channels(self) -> int:
        return self.w1.shape[0]


@dataclass(frozen=True)
class ChannelGateParams:
    """Single square FC layer C -> C with bias (no dimensionality reduction)."""

    w: np.ndarray  # (C, C)
    b: np.ndarray  # (C,)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64).ravel()
        if w.ndim != 2 or w.shape[0] != w.shape[1] or len(b) != w.shape[0]:
            raise ValueError("channel gate needs a square weight matrix and matching bias")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)

    @property
    def channels(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class GateStackConfig:
    """Order in which the gates apply; default channel first, then point."""

    order: tuple = ("channel", "point")

    def __post_init__(self):
        if not 1 <= len(self.order) <= 2:
            raise ValueError("gate order must list one or two layers")
        for name in self.order:
            if name not in ("channel", "point"):
                raise ValueError(f"unknown gate layer {name!r}")


# -- point gate --------------------------------------------------------------


def point_gate_forward(feats: np.ndarray, g: PointGateParams):
    h = feats @ g.w1
    h += g.b1
    np.maximum(h, 0.0, out=h)
    s = sigmoid(h @ g.w2 + g.b2)
    return feats * s[:, None], s, h


def point_gate_grads(gy: np.ndarray, feats: np.ndarray, g: PointGateParams, s, h):
    # out = x * s(x); ds flows through the perceptron back onto x as well
    gs = np.sum(gy * feats, axis=1) * s * (1.0 - s)  # (N,)
    gh = gs[:, None] * g.w2[None, :]
    gh[h <= 0.0] = 0.0  # h == 0 marks a clipped hidden unit
    gx = gy * s[:, None] + gh @ g.w1.T
    gw1 = feats.T @ gh
    gb1 = gh.sum(axis=0)
    gw2 = h.T @ gs
    gb2 = float(gs.sum())
    return gx, gw1, gb1, gw2, gb2


def point_gate(x: SparseTensor, g: PointGateParams):
    """Rescale each row by sigmoid(MLP(row)); returns (tensor, attention)."""
    if x.channels != g.channels:
        raise ChannelMismatch(f"{x.channels} channels vs gate width {g.channels}")
    out, s, _ = point_gate_forward(x.features, g)
    return x.with_features(out), s


# -- channel gate ------------------------------------------------------------


def channel_gate_forward(feats: np.ndarray, g: ChannelGateParams):
    a = np.mean(feats, axis=0)
    s = sigmoid(g.w @ a + g.b)
    return feats * s[None, :], s, a


def channel_gate_grads(gy: np.ndarray, feats: np.ndarray, g: ChannelGateParams, s, a):
    n = feats.shape[0]
    gs = np.sum(gy * feats, axis=0) * s * (1.0 - s)  # (C,)
    gw = np.outer(gs, a)
    gb = gs
    ga = g.w.T @ gs
    gx = gy * s[None, :] + ga[None, :] / n
    return gx, gw, gb


def channel_gate(x: SparseTensor, g: ChannelGateParams):
    """Rescale all rows by one shared per-channel gate from the row-mean context."""
    if x.n == 0:
        raise EmptyTensor("channel gate needs at least one row")
    if x.channels != g.channels:
        raise ChannelMismatch(f"{x.channels} channels vs gate width {g.channels}")
    out, s, _ = channel_gate_forward(x.features, g)
    return x.with_features(out), s


# -- stacking ----------------------------------------------------------------


def gate_stack(x: SparseTensor, params: dict, cfg: GateStackConfig):
    """Apply the configured gates in order; returns (tensor, attention dict)."""
    attn = {}
    for name in cfg.order:
        if name not in params:
            raise KeyError(f"missing parameters for {name!r} gate")
        if name == "channel":
            x, attn["channel"] = channel_gate(x, params["channel"])
        else:
            x, attn["point"] = point_gate(x, params["point"])
    return x, attn
