"""Desk-scale metric training over a synthetic world.

One triplet per anchor per epoch: anchors are submaps with at least one
positive partner (ground distance < 10 m); negatives are drawn from entries
farther than 50 m. The loss is a plain triplet margin on descriptor
distances, optimized with momentum SGD under a global gradient-norm cap.

Normalization layers standardize by each tensor's own row statistics during
training and at inference alike (freezing them after a warmup epoch proved
unstable at this scale: activations drift off the frozen statistics and the
embedding collapses). Running averages are still tracked and stored so the
folded-affine path stays usable.

Everything is keyed off one seed, so two runs produce identical weights.
"""

from dataclasses import dataclass, field

import numpy as np

from sparseloc import autodiff as ad
from sparseloc.errors import InsufficientData
from sparseloc.model import ModelConfig, ModelWeights, _Runner, build_plan
from sparseloc.retrieval import mine_pairs

LOG_HEADER = "epoch,mean_loss,active_triplets"


@dataclass
class TrainLog:
    note: str
    rows: list = field(default_factory=list)  # (epoch, mean_loss, active_triplets)

    def to_csv(self) -> str:
        lines = [f"# {self.note}", LOG_HEADER]
        lines += [f"{e},{ml:.6f},{at}" for e, ml, at in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class TrainSettings:
    lr: float = 0.01
    momentum: float = 0.9
    margin: float = 0.2
    running_momentum: float = 0.1  # update rate of the stored norm statistics
    pos_radius: float = 10.0
    neg_radius: float = 50.0
    clip_norm: float = 5.0  # global gradient-norm cap per step
    weight_decay: float = 0.0
    neg_top_k: int = 0  # 0 = uniform negatives; k > 0 = sample the k hardest


def _partner_table(catalog, pos_radius, neg_radius):
    pairs_pos, pairs_neg = mine_pairs(
        [(r.id, r.easting, r.northing) for r in catalog],
        pos_radius=pos_radius, neg_radius=neg_radius,
    )
    positives, negatives = {}, {}
    for a, b in pairs_pos:
        positives.setdefault(a, []).append(b)
        positives.setdefault(b, []).append(a)
    for a, b in pairs_neg:
        negatives.setdefault(a, []).append(b)
        negatives.setdefault(b, []).append(a)
    return positives, negatives


def train_toy(world, cfg: ModelConfig, epochs: int, seed: int,
              settings: TrainSettings = None, weights: ModelWeights = None):
    """Train from scratch (or from `weights`) and return (weights, log)."""
    st = settings or TrainSettings()
    positives, negatives = _partner_table(world.catalog, st.pos_radius, st.neg_radius)
    anchors = sorted(a for a in positives if a in negatives)
    if not anchors:
        raise InsufficientData("no anchor has both a positive and a negative partner")

    weights = weights.copy() if weights is not None else ModelWeights.init_random(cfg, seed)
    log = TrainLog(
        note=f"triplet margin loss (margin={st.margin}), momentum SGD "
             f"(lr={st.lr}, momentum={st.momentum}), seed={seed}"
    )
    if epochs == 0:
        return weights, log

    plans = {r.id: build_plan(world.submaps[r.id], cfg) for r in world.catalog}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    velocity = {name: np.zeros_like(arr) for name, arr in weights.tensors.items()
                if ModelWeights.trainable(name)}

    desc_cache = {}
    for epoch in range(epochs):
        order = rng.permutation(len(anchors))
        losses = []
        active = 0
        for ai in order:
            anchor = anchors[ai]
            pos = positives[anchor][rng.integers(len(positives[anchor]))]
            neg = _pick_negative(anchor, negatives[anchor], desc_cache, rng,
                                 top_k=st.neg_top_k)
            tape = ad.Tape(grad=True)
            runner = _Runner(tape, weights, cfg, "stats")
            descs = [runner.run(plans[sid]) for sid in (anchor, pos, neg)]
            for sid, node in zip((anchor, pos, neg), descs):
                desc_cache[sid] = node.value
            loss = ad.triplet_op(tape, *descs, st.margin)
            losses.append(loss.value)
            _apply_running_updates(weights, runner.stats, st.running_momentum)
            if loss.value > 0.0:
                active += 1
                ad.backward(tape, loss)
                _sgd_step(weights, runner, velocity, st)
        log.rows.append((epoch, float(np.mean(losses)), active))
    return weights, log


def _pick_negative(anchor, candidates, desc_cache, rng, top_k: int = 0):
    """Negative partner for one anchor.

    With `top_k` > 0, sample among the k nearest valid negatives according
    to descriptors cached from recent steps; otherwise (and until the cache
    warms up) sample uniformly.
    """
    if top_k > 0 and anchor in desc_cache:
        known = [c for c in candidates if c in desc_cache]
        if known:
            ref = desc_cache[anchor]
            dists = np.array([float(np.linalg.norm(desc_cache[c] - ref)) for c in known])
            ranked = np.argsort(dists, kind="stable")[:top_k]
            return known[int(ranked[rng.integers(len(ranked))])]
    return candidates[rng.integers(len(candidates))]


def _apply_running_updates(weights, stats, momentum):
    for prefix, mu, var in stats:
        for name, value in ((f"{prefix}.mean", mu), (f"{prefix}.var", var)):
            weights[name] = (1.0 - momentum) * weights[name] + momentum * value
    stats.clear()


def _sgd_step(weights, runner, velocity, st: TrainSettings):
    grads = {name: np.asarray(runner.nodes[name].grad)
             for name in velocity if runner.nodes[name].grad is not None}
    total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    scale = st.clip_norm / total if total > st.clip_norm else 1.0
    for name, g in grads.items():
        vel = velocity[name]
        vel *= st.momentum
        vel += g * scale
        if st.weight_decay and not name.endswith(("gem.p", ".norm.gamma", ".norm.beta")):
            vel += st.weight_decay * weights[name]
        weights[name] = weights[name] - st.lr * vel
    # keep the pooling exponent a valid power mean
    weights["gem.p"] = np.maximum(weights["gem.p"], 1.0)
