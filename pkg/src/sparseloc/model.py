"""Axis-factorized sparse encoder-decoder producing a global descriptor.

The network: an initial dense cubic convolution, a down-sampling encoder of
axis-convolution blocks, and a decoder that restores recorded encoder
supports, gates both branches, fuses them by addition and pools the result
into one descriptor.

Structure (supports and kernel maps) depends only on the input coordinates,
so it is captured once per cloud in a `ForwardPlan` and reused across
training steps; features flow through an autodiff tape.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from sparseloc import autodiff as ad
from sparseloc import ops
from sparseloc.errors import EmptyCloud, IncompleteWeights, SupportCollapse
from sparseloc.ops import AXES, DOWN_OFFSETS, ConvKernel, NormAct, axis_offsets, cube_offsets
from sparseloc.sparse import SparseTensor, _build_pairs, downsample_coords, voxelize


@dataclass(frozen=True)
class AxisBlockConfig:
    """One residual block: two sub-blocks of stacked per-axis convolutions."""

    channels: int
    d: int = 3
    axis_order: tuple = ("x", "y", "z")
    extra_axis: str = "x"  # None disables the extra layer
    extra_dilation: int = 1

    def __post_init__(self):
        object.__setattr__(self, "axis_order", tuple(self.axis_order))
        if self.d % 2 == 0 or self.d < 1:
            raise ValueError("tap count d must be odd and positive")
        if sorted(self.axis_order) != sorted(AXES):
            raise ValueError("axis_order must be a permutation of (x, y, z)")
        if self.extra_axis is not None and self.extra_axis not in AXES:
            raise ValueError(f"bad extra_axis {self.extra_axis!r}")
        if self.extra_dilation < 1:
            raise ValueError("extra_dilation must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture description."""

    k0: int = 5
    c0: int = 32
    channels: tuple = (32, 64, 64, 256)  # encoder widths; last entry is D1
    d2: int = 256  # decoder width = descriptor length
    depth_up: int = 2
    d: int = 3
    axis_order: tuple = ("x", "y", "z")
    extra_axis: str = "x"
    extra_dilation: int = 2
    dilation_depth: int = 1  # 1-based block index using the dilated extra layer; 0 = none
    gate_order: tuple = ("channel", "point")
    gem_p: float = 3.0
    gem_eps: float = 1e-6
    cell: float = 0.01
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "axis_order", tuple(self.axis_order))
        object.__setattr__(self, "gate_order", tuple(self.gate_order))
        if not 1 <= self.depth_up < self.depth_down:
            raise ValueError("need 1 <= depth_up < depth_down")
        if not 0 <= self.dilation_depth <= self.depth_down:
            raise ValueError("dilation_depth out of range")
        if self.k0 < 1 or self.k0 % 2 == 0:
            raise ValueError("k0 must be odd and positive")

    @property
    def depth_down(self) -> int:
        return len(self.channels)

    @property
    def d1(self) -> int:
        return self.channels[-1]

    def block_config(self, level: int) -> AxisBlockConfig:
        dil = self.extra_dilation if self.dilation_depth == level + 1 else 1
        return AxisBlockConfig(
            channels=self.channels[level],
            d=self.d,
            axis_order=self.axis_order,
            extra_axis=self.extra_axis,
            extra_dilation=dil,
        )

    def skip_level(self, dec: int) -> int:
        """Encoder level whose recorded map fuses with decoder step `dec`."""
        return self.depth_down - 2 - dec

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Scaled-down preset for desk-size runs and the acceptance suite."""
        base = dict(c0=16, channels=(16, 32, 32, 32), d2=32, cell=0.02)
        base.update(overrides)
        return cls(**base)


_NORM_FIELDS = ("gamma", "beta", "mean", "var")


def weight_manifest(cfg: ModelConfig):
    """Ordered (name, shape) pairs of every tensor the model needs."""
    rows = [("init.w", (1, cfg.k0, cfg.k0, cfg.k0, cfg.c0))]
    rows += [(f"init.norm.{f}", (cfg.c0,)) for f in _NORM_FIELDS]
    prev = cfg.c0
    for lvl, ch in enumerate(cfg.channels):
        rows.append((f"enc{lvl}.down.w", (prev, 2, 2, 2, ch)))
        rows += [(f"enc{lvl}.down.norm.{f}", (ch,)) for f in _NORM_FIELDS]
        for sub in range(2):
            for ax in range(3):
                rows.append((f"enc{lvl}.sub{sub}.ax{ax}.w", (ch, cfg.d, ch)))
                rows += [(f"enc{lvl}.sub{sub}.ax{ax}.norm.{f}", (ch,)) for f in _NORM_FIELDS]
            if cfg.extra_axis is not None:
                rows.append((f"enc{lvl}.sub{sub}.extra.w", (ch, cfg.d, ch)))
                rows += [(f"enc{lvl}.sub{sub}.extra.norm.{f}", (ch,)) for f in _NORM_FIELDS]
        prev = ch
    for dec in range(cfg.depth_up):
        cin = cfg.d1 if dec == 0 else cfg.d2
        skip_ch = cfg.channels[cfg.skip_level(dec)]
        rows.append((f"dec{dec}.up.w", (cin, 2, 2, 2, cfg.d2)))
        rows += [(f"dec{dec}.up.norm.{f}", (cfg.d2,)) for f in _NORM_FIELDS]
        for branch in ("main", "skip"):
            rows.append((f"dec{dec}.{branch}.channel.w", (cfg.d2, cfg.d2)))
            rows.append((f"dec{dec}.{branch}.channel.b", (cfg.d2,)))
            rows.append((f"dec{dec}.{branch}.point.w1", (cfg.d2, cfg.d2)))
            rows.append((f"dec{dec}.{branch}.point.b1", (cfg.d2,)))
            rows.append((f"dec{dec}.{branch}.point.w2", (cfg.d2,)))
            rows.append((f"dec{dec}.{branch}.point.b2", ()))
        rows.append((f"dec{dec}.align.w", (skip_ch, cfg.d2)))
        rows.append((f"dec{dec}.align.b", (cfg.d2,)))
    rows.append(("gem.p", ()))
    return rows


class ModelWeights:
    """Named tensor store; insertion order matches `weight_manifest`."""

    def __init__(self, tensors: dict):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self.tensors.items()})

    def validate(self, cfg: ModelConfig) -> None:
        for name, shape in weight_manifest(cfg):
            if name not in self.tensors:
                raise IncompleteWeights(f"missing tensor {name!r}")
            if tuple(self.tensors[name].shape) != tuple(shape):
                raise IncompleteWeights(
                    f"tensor {name!r} has shape {self.tensors[name].shape}, want {shape}"
                )

    @classmethod
    def init_random(cls, cfg: ModelConfig, seed: int) -> "ModelWeights":
        """He-style init for convolutions, small-random for gates, identity norms."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in weight_manifest(cfg):
            if name.endswith(".norm.gamma") or name.endswith(".norm.var"):
                tensors[name] = np.ones(shape)
            elif name.endswith(".norm.beta") or name.endswith(".norm.mean"):
                tensors[name] = np.zeros(shape)
            elif name == "gem.p":
                tensors[name] = np.asarray(cfg.gem_p)
            elif ".channel." in name or ".point." in name:
                if name.endswith(("b", "b1", "b2")):
                    tensors[name] = np.zeros(shape)
                else:
                    tensors[name] = rng.normal(0.0, 0.01, size=shape)
            elif name.endswith("align.b"):
                tensors[name] = np.zeros(shape)
            elif name.endswith("align.w"):
                tensors[name] = rng.normal(0.0, np.sqrt(1.0 / shape[0]), size=shape)
            else:  # convolution weights
                fan_in = int(np.prod(shape[:-1]))
                tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return cls(tensors)

    @staticmethod
    def trainable(name: str) -> bool:
        return not name.endswith((".norm.mean", ".norm.var"))


# -- forward plan --------------------------------------------------------------


@dataclass
class LevelPlan:
    coords: np.ndarray
    keys: np.ndarray
    stride: int
    down_map: object  # KernelMap from the previous support
    axis_maps: dict  # (axis, dilation) -> KernelMap on this support


@dataclass
class DecPlan:
    skip_level: int
    up_map: object  # transposed KernelMap onto the skip support


@dataclass
class ForwardPlan:
    base: SparseTensor  # voxelized input (all-ones features)
    init_map: object
    levels: list
    decs: list


def _axis_maps_for(coords, keys, stride, d, block: AxisBlockConfig):
    maps = {}
    need = [(ax, 1) for ax in AXES]
    if block.extra_axis is not None:
        need.append((block.extra_axis, block.extra_dilation))
    for ax, dil in need:
        if (ax, dil) not in maps:
            maps[(ax, dil)] = _build_pairs(keys, coords, axis_offsets(ax, d),
                                           step=dil * stride)
    return maps


def build_plan(cloud: np.ndarray, cfg: ModelConfig, batch: int = 0) -> ForwardPlan:
    """Voxelize a cloud and precompute every support and kernel map."""
    base = voxelize(cloud, cfg.cell, batch=batch)
    if base.n == 0:
        raise EmptyCloud("voxelization produced no coordinates")
    init_map = _build_pairs(base.keys, base.coords, cube_offsets(cfg.k0), step=1)

    levels = []
    cur = base
    for lvl in range(cfg.depth_down):
        coarse = downsample_coords(cur)
        if len(coarse) == 0:
            raise SupportCollapse(f"empty support at encoder level {lvl}")
        down_map = _build_pairs(cur.keys, coarse, DOWN_OFFSETS, step=cur.stride)
        nxt = SparseTensor(coarse, np.zeros((len(coarse), 1)), 2 * cur.stride)
        maps = _axis_maps_for(nxt.coords, nxt.keys, nxt.stride, cfg.d,
                              cfg.block_config(lvl))
        levels.append(LevelPlan(nxt.coords, nxt.keys, nxt.stride, down_map, maps))
        cur = nxt

    decs = []
    for dec in range(cfg.depth_up):
        skip_lvl = cfg.skip_level(dec)
        fine = levels[skip_lvl]
        coarse = levels[skip_lvl + 1]
        up_map = _build_pairs(coarse.keys, fine.coords, DOWN_OFFSETS,
                              step=-fine.stride)
        decs.append(DecPlan(skip_lvl, up_map))
    return ForwardPlan(base, init_map, levels, decs)


@dataclass
class Trace:
    """Optional per-run inspection data."""

    support_sizes: list = field(default_factory=list)  # (stride, n) per level
    attention: list = field(default_factory=list)  # (label, coords, scores) rows


class _Runner:
    """Applies the weight tensors through one tape over a fixed plan.

    Norm modes: "stats" standardizes every tensor by its own row statistics
    (the default for training and inference alike; deterministic because row
    order is canonical); "frozen" folds the stored running statistics into a
    per-channel affine.
    """

    def __init__(self, tape, weights: ModelWeights, cfg: ModelConfig,
                 norm_mode: str = "stats"):
        if norm_mode not in ("stats", "frozen"):
            raise ValueError(f"bad norm mode {norm_mode!r}")
        self.tape = tape
        self.cfg = cfg
        self.norm_mode = norm_mode
        self.stats = []  # (prefix, row_mean, row_var) collected in stats mode
        self.nodes = {
            name: tape.leaf(arr, trainable=ModelWeights.trainable(name))
            for name, arr in weights.tensors.items()
        }

    def conv(self, x, wname, kmap, n_out, flatten):
        taps = self.nodes[wname]
        if flatten:
            w = taps.value
            k = w.shape[1] * w.shape[2] * w.shape[3]
            flat = np.ascontiguousarray(
                w.transpose(1, 2, 3, 0, 4).reshape(k, w.shape[0], w.shape[4]))
            # reshape grads back onto the stored 5D layout
            node = self.tape.op(flat, (taps,), lambda g, s=w.shape: (
                g.reshape(s[1], s[2], s[3], s[0], s[4]).transpose(3, 0, 1, 2, 4),))
            taps = node
        else:
            node = self.tape.op(
                np.ascontiguousarray(taps.value.transpose(1, 0, 2)),
                (taps,), lambda g: (g.transpose(1, 0, 2),))
            taps = node
        return ad.conv_op(self.tape, x, taps, None, kmap, n_out)

    def norm(self, x, prefix, act="relu"):
        gamma = self.nodes[f"{prefix}.gamma"]
        beta = self.nodes[f"{prefix}.beta"]
        if self.norm_mode == "stats":
            node, mu, var = ad.batchnorm_op(self.tape, x, gamma, beta,
                                            self.cfg.norm_eps, act)
            self.stats.append((prefix, mu, var))
            return node
        mean = self.nodes[f"{prefix}.mean"].value
        var = self.nodes[f"{prefix}.var"].value
        return ad.norm_affine_op(self.tape, x, gamma, beta, mean, var,
                                 self.cfg.norm_eps, act)

    def axis_block(self, x, prefix, block: AxisBlockConfig, maps):
        order_idx = {ax: i for i, ax in enumerate(AXES)}
        for sub in range(2):
            inp = x
            for ax in block.axis_order:
                name = f"{prefix}.sub{sub}.ax{order_idx[ax]}"
                x = self.conv(x, f"{name}.w", maps[(ax, 1)], x.value.shape[0],
                              flatten=False)
                x = self.norm(x, f"{name}.norm")
            if block.extra_axis is not None:
                kmap = maps[(block.extra_axis, block.extra_dilation)]
                x = self.conv(x, f"{prefix}.sub{sub}.extra.w", kmap,
                              x.value.shape[0], flatten=False)
                x = self.norm(x, f"{prefix}.sub{sub}.extra.norm")
            x = ad.add_op(self.tape, x, inp)
            relu = lambda g, v: (np.where(v > 0.0, g, 0.0),)
            y = np.maximum(x.value, 0.0)
            x = self.tape.op(y, (x,), lambda g, v=x.value: relu(g, v))
        return x

    def gates(self, x, prefix):
        attn = {}
        for name in self.cfg.gate_order:
            if name == "channel":
                x, s = ad.channel_gate_op(self.tape, x,
                                          self.nodes[f"{prefix}.channel.w"],
                                          self.nodes[f"{prefix}.channel.b"])
                attn["channel"] = s
            else:
                x, s = ad.point_gate_op(self.tape, x,
                                        self.nodes[f"{prefix}.point.w1"],
                                        self.nodes[f"{prefix}.point.b1"],
                                        self.nodes[f"{prefix}.point.w2"],
                                        self.nodes[f"{prefix}.point.b2"])
                attn["point"] = s
        return x, attn

    def run(self, plan: ForwardPlan, trace: Trace = None):
        cfg = self.cfg
        x = self.tape.leaf(plan.base.features)
        x = self.conv(x, "init.w", plan.init_map, plan.base.n, flatten=True)
        x = self.norm(x, "init.norm")
        if trace is not None:
            trace.support_sizes.append((plan.base.stride, plan.base.n))

        fmaps = []  # (encoder level, feature node) recorded for fusion
        for lvl, level in enumerate(plan.levels):
            x = self.conv(x, f"enc{lvl}.down.w", level.down_map,
                          len(level.coords), flatten=True)
            x = self.norm(x, f"enc{lvl}.down.norm")
            x = self.axis_block(x, f"enc{lvl}", cfg.block_config(lvl), level.axis_maps)
            if cfg.depth_down - cfg.depth_up - 1 <= lvl < cfg.depth_down - 1:
                fmaps.append(x)
            if trace is not None:
                trace.support_sizes.append((level.stride, len(level.coords)))

        for dec, dplan in enumerate(plan.decs):
            fine = plan.levels[dplan.skip_level]
            x = self.conv(x, f"dec{dec}.up.w", dplan.up_map, len(fine.coords),
                          flatten=True)
            x = self.norm(x, f"dec{dec}.up.norm")
            x, attn_main = self.gates(x, f"dec{dec}.main")
            y = fmaps[-1 - dec]
            y = ad.linear_op(self.tape, y, self.nodes[f"dec{dec}.align.w"],
                             self.nodes[f"dec{dec}.align.b"])
            y, attn_skip = self.gates(y, f"dec{dec}.skip")
            x = ad.add_op(self.tape, x, y)
            if trace is not None:
                for label, attn in (("main", attn_main), ("skip", attn_skip)):
                    for gname, scores in attn.items():
                        trace.attention.append(
                            (f"dec{dec}.{label}.{gname}", fine.coords, scores))

        return ad.gem_op(self.tape, x, self.nodes["gem.p"], cfg.gem_eps)


def run_plan(plan: ForwardPlan, weights: ModelWeights, cfg: ModelConfig,
             tape=None, norm_mode: str = "stats", want_trace: bool = False):
    """Descriptor node (plus trace and runner) for one planned cloud."""
    tape = tape if tape is not None else ad.Tape(grad=False)
    runner = _Runner(tape, weights, cfg, norm_mode)
    trace = Trace() if want_trace else None
    node = runner.run(plan, trace)
    return node, trace, runner


def forward(cloud: np.ndarray, weights: ModelWeights, cfg: ModelConfig,
            want_trace: bool = False, norm_mode: str = "stats"):
    """Full inference pass: cloud in, (descriptor, trace) out."""
    weights.validate(cfg)
    plan = build_plan(cloud, cfg)
    node, trace, _ = run_plan(plan, weights, cfg, norm_mode=norm_mode,
                              want_trace=want_trace)
    return node.value, trace


# -- standalone block ops (same machinery, ad-hoc maps) -------------------------


def initial_convolution(x: SparseTensor, kernel: ConvKernel, norm: NormAct) -> SparseTensor:
    """Dense cubic convolution on the unchanged support, then norm/act."""
    if x.stride != 1:
        raise ValueError("initial convolution expects a stride-1 tensor")
    y = ops.sparse_conv(x, kernel)
    return ops.norm_act(y, norm)


def axis_block(x: SparseTensor, weights: dict, block: AxisBlockConfig,
               norm_eps: float = 1e-5) -> SparseTensor:
    """Standalone residual axis-convolution block (inference path).

    `weights` holds flat keys `sub{s}.ax{i}.w`, `sub{s}.ax{i}.norm.{field}`
    and optionally `sub{s}.extra.*`, shaped as in `weight_manifest`.
    """
    cfg = ModelConfig(
        c0=block.channels, channels=(block.channels, block.channels),
        d2=block.channels, depth_up=1, d=block.d, axis_order=block.axis_order,
        extra_axis=block.extra_axis, extra_dilation=block.extra_dilation,
        dilation_depth=1 if block.extra_dilation > 1 else 0, norm_eps=norm_eps,
    )
    maps = _axis_maps_for(x.coords, x.keys, x.stride, block.d, block)
    tape = ad.Tape(grad=False)
    runner = _Runner.__new__(_Runner)
    runner.tape = tape
    runner.cfg = cfg
    runner.norm_mode = "frozen"
    runner.stats = []
    runner.nodes = {f"pfx.{k}": tape.leaf(np.asarray(v, dtype=np.float64))
                    for k, v in weights.items()}
    node = runner.axis_block(tape.leaf(x.features), "pfx", block, maps)
    return x.with_features(node.value)


# -- parameter accounting -------------------------------------------------------


@dataclass
class ParamReport:
    rows: list  # (name, count)
    total: int
    dense_equivalent_total: int
    triples: list  # (prefix, asym_weights, dense_weights, reduction)

    @property
    def reduction_percent(self) -> float:
        """Weight reduction of the factorized cores vs their dense equivalents."""
        asym = sum(t[1] for t in self.triples)
        dense = sum(t[2] for t in self.triples)
        return 100.0 * (1.0 - asym / dense) if dense else 0.0


def parameter_count(cfg: ModelConfig) -> ParamReport:
    """Exact per-tensor counts plus the dense-3D-kernel equivalent.

    The dense equivalent swaps each sub-block's triple of d-tap axis kernels
    (3 * d * c^2 weights) for a single d^3 cubic kernel (d^3 * c^2 weights);
    every other tensor is unchanged.
    """
    rows = [(name, int(np.prod(shape)) if shape else 1)
            for name, shape in weight_manifest(cfg)]
    total = sum(c for _, c in rows)
    triples = []
    for lvl, ch in enumerate(cfg.channels):
        for sub in range(2):
            if cfg.d == 1:
                # a 1-tap kernel factorizes trivially; chaining pointwise maps
                # stores nothing beyond the single pointwise kernel
                asym = dense = ch * ch
            else:
                asym = 3 * cfg.d * ch * ch
                dense = cfg.d**3 * ch * ch
            reduction = float(1 - Fraction(asym, dense))
            triples.append((f"enc{lvl}.sub{sub}", asym, dense, reduction))
    dense_total = total + sum(t[2] - t[1] for t in triples)
    return ParamReport(rows, total, dense_total, triples)
