"""Reverse-mode differentiation for every trainable layer.

A `Tape` records nodes in execution order; each node carries the backward
closure for exactly one layer application. Backward walks the tape in
reverse, accumulating gradients into `Node.grad`. Forward math is shared
with the inference path (see `ops` / `gating`), so the two can never drift.

`gradcheck` certifies a backward rule against central finite differences.
Input elements sitting on a non-smooth site (relu corner, clamp edge, hinge)
are detected by comparing the one-sided difference quotients and reported as
excluded rather than failed.
"""

from dataclasses import dataclass

import numpy as np

from sparseloc import gating, ops
from sparseloc.errors import LengthMismatch, NonFiniteGradient, UnrecordedNode

# Test hook: name of an op whose backward rule is deliberately corrupted.
# Used by the self-test harness to prove gradcheck catches broken rules.
_CORRUPT_OP = None


def set_corrupt_backward(name):
    global _CORRUPT_OP
    _CORRUPT_OP = name


def _maybe_corrupt(op_name, grad):
    if _CORRUPT_OP == op_name and grad is not None:
        return grad * 1.01 + 1e-3
    return grad


class Node:
    __slots__ = ("value", "parents", "bwd", "grad", "trainable", "tape")

    def __init__(self, value, parents, bwd, tape, trainable=False):
        self.value = value
        self.parents = parents
        self.bwd = bwd
        self.grad = None
        self.trainable = trainable
        self.tape = tape


class Tape:
    """Execution-ordered operation record; one tape per forward/backward pair."""

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.nodes = []

    def leaf(self, value, trainable: bool = False) -> Node:
        node = Node(value, (), None, self, trainable)
        if self.grad:
            self.nodes.append(node)
        return node

    def op(self, value, parents, bwd) -> Node:
        node = Node(value, tuple(parents), bwd if self.grad else None, self)
        if self.grad:
            self.nodes.append(node)
        return node


def backward(tape: Tape, loss: Node) -> None:
    """Populate `grad` on every node reachable backwards from `loss`."""
    if loss.tape is not tape or not tape.grad:
        raise UnrecordedNode("loss node was not recorded on this tape")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value) if isinstance(loss.value, np.ndarray) else 1.0
    seen = False
    for node in reversed(tape.nodes):
        if node is loss:
            seen = True
        if not seen or node.grad is None or node.bwd is None:
            continue
        for parent, g in zip(node.parents, node.bwd(node.grad)):
            if g is None or parent is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# -- layer ops ----------------------------------------------------------------


def conv_op(tape, x, taps, bias, kmap, n_out):
    """Kernel-map convolution; covers same/strided/transposed modes."""
    y = ops.conv_apply(x.value, taps.value, None if bias is None else bias.value,
                       kmap, n_out)
    n_in = x.value.shape[0]

    def bwd(gy):
        gx = ops.conv_grad_feats(gy, taps.value, kmap, n_in)
        gw = ops.conv_grad_taps(x.value, gy, kmap)
        gb = None if bias is None else gy.sum(axis=0)
        return _maybe_corrupt("conv", gx), gw, gb

    return tape.op(y, (x, taps, bias), bwd)


def linear_op(tape, x, w, bias=None):
    """Per-row linear map (the 1x1x1 channel-alignment convolution)."""
    y = x.value @ w.value
    if bias is not None:
        y = y + bias.value

    def bwd(gy):
        gb = None if bias is None else gy.sum(axis=0)
        return _maybe_corrupt("linear", gy @ w.value.T), x.value.T @ gy, gb

    return tape.op(y, (x, w, bias), bwd)


def norm_affine_op(tape, x, gamma, beta, mean, var, eps, act):
    """Normalization against frozen statistics, scale/shift trainable.

    Folded to one fused affine so the tape retains a single array per call;
    backward recomputes the normalized input from the parent's stored value.
    """
    inv = 1.0 / np.sqrt(var + eps)
    scale = gamma.value * inv
    y = x.value * scale
    y += beta.value - mean * scale
    relu = act == "relu"
    if relu:
        np.maximum(y, 0.0, out=y)

    def bwd(gy):
        # y > 0 iff the pre-activation was positive, so y serves as the mask
        gz = np.where(y > 0.0, gy, 0.0) if relu else gy
        ggamma = (gz * ((x.value - mean) * inv)).sum(axis=0)
        return _maybe_corrupt("norm_affine", gz * scale), ggamma, gz.sum(axis=0)

    return tape.op(y, (x, gamma, beta), bwd)


def batchnorm_op(tape, x, gamma, beta, eps, act):
    """Normalization by this tensor's own row statistics.

    Returns (node, batch_mean, batch_var) so the caller can update running
    statistics.
    """
    n = x.value.shape[0]
    mu = x.value.mean(axis=0)
    var = ((x.value - mu) ** 2).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    z = gamma.value * xhat + beta.value
    y = np.maximum(z, 0.0) if act == "relu" else z

    def bwd(gy):
        gz = np.where(z > 0.0, gy, 0.0) if act == "relu" else gy
        ggamma = (gz * xhat).sum(axis=0)
        gbeta = gz.sum(axis=0)
        gxhat = gz * gamma.value
        gx = (inv / n) * (
            n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0)
        )
        return _maybe_corrupt("batchnorm", gx), ggamma, gbeta

    return tape.op(y, (x, gamma, beta), bwd), mu, var


def point_gate_op(tape, x, w1, b1, w2, b2):
    g = gating.PointGateParams(w1.value, b1.value, w2.value, float(b2.value))
    y, s, ctx = gating.point_gate_forward(x.value, g)

    def bwd(gy):
        gx, gw1, gb1, gw2, gb2 = gating.point_gate_grads(gy, x.value, g, s, ctx)
        return _maybe_corrupt("point_gate", gx), gw1, gb1, gw2, np.float64(gb2)

    return tape.op(y, (x, w1, b1, w2, b2), bwd), s


def channel_gate_op(tape, x, w, b):
    g = gating.ChannelGateParams(w.value, b.value)
    y, s, a = gating.channel_gate_forward(x.value, g)

    def bwd(gy):
        gx, gw, gb = gating.channel_gate_grads(gy, x.value, g, s, a)
        return _maybe_corrupt("channel_gate", gx), gw, gb

    return tape.op(y, (x, w, b), bwd), s


def gem_op(tape, x, p, eps):
    g, ctx = ops.gem_forward(x.value, float(p.value), eps)

    def bwd(gg):
        gx, gp = ops.gem_grads(gg, x.value, float(p.value), eps, ctx)
        return _maybe_corrupt("gem", gx), np.float64(gp)

    return tape.op(g, (x, p), bwd)


def add_op(tape, a, b):
    def bwd(gy):
        return gy, gy

    return tape.op(a.value + b.value, (a, b), bwd)


def dot_sum_op(tape, x, r):
    """Scalar projection sum(x * r) with constant r; handy for building losses."""
    def bwd(gl):
        return (gl * r,)

    return tape.op(float(np.sum(x.value * r)), (x,), bwd)


def triplet_op(tape, ga, gp, gn, margin: float):
    """Hinge on descriptor distances: max(0, d(a,p) - d(a,n) + margin)."""
    dap_vec = ga.value - gp.value
    dan_vec = ga.value - gn.value
    dap = float(np.linalg.norm(dap_vec))
    dan = float(np.linalg.norm(dan_vec))
    loss = max(0.0, dap - dan + margin)

    def bwd(gl):
        if loss == 0.0:
            z = np.zeros_like(ga.value)
            return z, z.copy(), z.copy()
        up = dap_vec / dap if dap > 0.0 else np.zeros_like(dap_vec)
        un = dan_vec / dan if dan > 0.0 else np.zeros_like(dan_vec)
        return _maybe_corrupt("triplet", gl * (up - un)), gl * (-up), gl * un

    return tape.op(loss, (ga, gp, gn), bwd)


def triplet_loss(g_a, g_p, g_n, margin: float) -> float:
    """Forward-only triplet margin loss on three equal-length descriptors."""
    g_a, g_p, g_n = (np.asarray(v, dtype=np.float64) for v in (g_a, g_p, g_n))
    if not (g_a.shape == g_p.shape == g_n.shape):
        raise LengthMismatch("descriptors must share one length")
    return max(0.0, float(np.linalg.norm(g_a - g_p) - np.linalg.norm(g_a - g_n)) + margin)


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_excluded: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def gradcheck(build, inputs, tolerance: float = 1e-4, h: float = 1e-5,
              kink_gap: float = 1e-2) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    `build(tape, nodes)` must return a scalar loss node over leaf nodes made
    from `inputs`. Every input element is perturbed by +-h; elements whose
    forward and backward one-sided quotients disagree by more than `kink_gap`
    (relative) sit on a non-smooth site and are excluded, not failed.
    """
    inputs = [np.asarray(v, dtype=np.float64) for v in inputs]
    tape = Tape(grad=True)
    nodes = [tape.leaf(v.copy(), trainable=True) for v in inputs]
    loss = build(tape, nodes)
    backward(tape, loss)
    analytic = []
    for node, v in zip(nodes, inputs):
        g = node.grad if node.grad is not None else np.zeros_like(v)
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("analytic gradient contains NaN or Inf")
        analytic.append(g)

    def eval_loss(arrays):
        t = Tape(grad=False)
        return float(build(t, [t.leaf(a) for a in arrays]).value)

    f0 = eval_loss(inputs)
    max_rel = 0.0
    checked = 0
    excluded = 0
    for i, base in enumerate(inputs):
        flat = base.reshape(-1)
        g_flat = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = eval_loss(inputs)
            flat[j] = orig - h
            fm = eval_loss(inputs)
            flat[j] = orig
            fwd = (fp - f0) / h
            bwdq = (f0 - fm) / h
            gap = abs(fwd - bwdq) / max(1e-8, abs(fwd) + abs(bwdq))
            if gap > kink_gap:
                excluded += 1
                continue
            num = (fp - fm) / (2.0 * h)
            rel = abs(g_flat[j] - num) / max(1e-8, abs(g_flat[j]) + abs(num))
            max_rel = max(max_rel, rel)
            checked += 1
    return GradCheckReport(max_rel, checked, excluded, tolerance)
