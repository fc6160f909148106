"""Point- and channel-wise gating: reweighting semantics and invariants."""

import numpy as np
import pytest

from sparseloc import gating
from sparseloc.errors import ChannelMismatch, EmptyTensor
from sparseloc.sparse import SparseTensor

from conftest import line_tensor


def perceptron_oracle(row, w1, b1, w2, b2):
    """Standalone two-layer perceptron evaluation for one row."""
    hidden = np.maximum(row @ w1 + b1, 0.0)
    return 1.0 / (1.0 + np.exp(-(hidden @ w2 + b2)))


def random_point_params(rng, c):
    return gating.PointGateParams(rng.normal(0, 1, (c, c)), rng.normal(0, 1, c),
                                  rng.normal(0, 1, c), float(rng.normal()))


class TestPointGate:
    def test_zero_params_halve(self, rng):
        c = 3
        t = line_tensor(range(4), channels=c).with_features(rng.normal(0, 1, (4, c)))
        g = gating.PointGateParams(np.zeros((c, c)), np.zeros(c), np.zeros(c), 0.0)
        out, s = gating.point_gate(t, g)
        assert np.all(s == 0.5)
        assert np.array_equal(out.features, 0.5 * t.features)

    def test_zero_rows_hit_bias_path(self):
        c = 2
        t = line_tensor([0], channels=c).with_features(np.zeros((1, c)))
        g = gating.PointGateParams(np.ones((c, c)), np.zeros(c), np.ones(c), 0.0)
        _, s = gating.point_gate(t, g)
        assert s.tolist() == [0.5]

    def test_scores_match_perceptron_oracle(self, rng):
        c = 3
        feats = rng.normal(0, 1, (4, c))
        t = line_tensor(range(4), channels=c).with_features(feats)
        g = random_point_params(rng, c)
        out, s = gating.point_gate(t, g)
        for n in range(4):
            expected = perceptron_oracle(feats[n], g.w1, g.b1, g.w2, g.b2)
            assert abs(s[n] - expected) < 1e-12
            nz = feats[n] != 0
            ratios = out.features[n][nz] / feats[n][nz]
            assert np.abs(ratios - s[n]).max() < 1e-12

    def test_preserves_row_direction(self, rng):
        c = 4
        feats = rng.normal(0, 1, (8, c))
        t = line_tensor(range(8), channels=c).with_features(feats)
        out, s = gating.point_gate(t, random_point_params(rng, c))
        assert np.all((s > 0) & (s < 1))
        assert np.abs(out.features - feats * s[:, None]).max() == 0.0

    def test_channel_mismatch(self, rng):
        t = line_tensor([0], channels=3)
        with pytest.raises(ChannelMismatch):
            gating.point_gate(t, random_point_params(rng, 2))


class TestChannelGate:
    def test_single_row_mean_is_row(self, rng):
        c = 3
        feats = rng.normal(0, 1, (1, c))
        t = line_tensor([0], channels=c).with_features(feats)
        g = gating.ChannelGateParams(rng.normal(0, 1, (c, c)), rng.normal(0, 1, c))
        out, s = gating.channel_gate(t, g)
        expected = 1.0 / (1.0 + np.exp(-(g.w @ feats[0] + g.b)))
        assert np.abs(s - expected).max() < 1e-12
        assert np.abs(out.features - feats * s).max() < 1e-15

    def test_zero_params_halve(self, rng):
        c = 4
        feats = rng.normal(0, 1, (5, c))
        t = line_tensor(range(5), channels=c).with_features(feats)
        g = gating.ChannelGateParams(np.zeros((c, c)), np.zeros(c))
        out, s = gating.channel_gate(t, g)
        assert np.all(s == 0.5)
        assert np.array_equal(out.features, 0.5 * feats)

    def test_shared_scale_matches_oracle(self, rng):
        c = 4
        feats = rng.normal(0, 1, (5, c))
        t = line_tensor(range(5), channels=c).with_features(feats)
        g = gating.ChannelGateParams(rng.normal(0, 1, (c, c)), rng.normal(0, 1, c))
        out, s = gating.channel_gate(t, g)
        # independent mean -> affine -> sigmoid evaluation
        a = feats.mean(axis=0)
        expected = 1.0 / (1.0 + np.exp(-(g.w @ a + g.b)))
        assert np.abs(s - expected).max() < 1e-12
        for col in range(c):
            nz = feats[:, col] != 0
            ratios = out.features[nz, col] / feats[nz, col]
            assert np.abs(ratios - s[col]).max() < 1e-12

    def test_empty_tensor(self, rng):
        t = SparseTensor(np.empty((0, 4), dtype=np.int64), np.empty((0, 2)), 1)
        with pytest.raises(EmptyTensor):
            gating.channel_gate(t, gating.ChannelGateParams(np.zeros((2, 2)), np.zeros(2)))

    def test_permutation_equivariant(self, rng):
        c = 3
        feats = rng.normal(0, 1, (6, c))
        t = line_tensor(range(6), channels=c).with_features(feats)
        g = gating.ChannelGateParams(rng.normal(0, 1, (c, c)), rng.normal(0, 1, c))
        out, _ = gating.channel_gate(t, g)
        perm = rng.permutation(6)
        tp = t.with_features(feats[perm])
        outp, _ = gating.channel_gate(tp, g)
        assert np.abs(outp.features - out.features[perm]).max() < 1e-12


class TestGateStack:
    def params(self, rng, c, zero=False):
        if zero:
            return {
                "channel": gating.ChannelGateParams(np.zeros((c, c)), np.zeros(c)),
                "point": gating.PointGateParams(np.zeros((c, c)), np.zeros(c),
                                                np.zeros(c), 0.0),
            }
        return {
            "channel": gating.ChannelGateParams(rng.normal(0, 1, (c, c)),
                                                rng.normal(0, 1, c)),
            "point": random_point_params(rng, c),
        }

    def test_zeroed_gates_quarter(self, rng):
        c = 3
        feats = rng.normal(0, 1, (4, c))
        t = line_tensor(range(4), channels=c).with_features(feats)
        out, _ = gating.gate_stack(t, self.params(rng, c, zero=True),
                                   gating.GateStackConfig(("channel", "point")))
        assert np.abs(out.features - 0.25 * feats).max() < 1e-15

    def test_singleton_order(self, rng):
        c = 3
        feats = rng.normal(0, 1, (4, c))
        t = line_tensor(range(4), channels=c).with_features(feats)
        params = self.params(rng, c)
        out, _ = gating.gate_stack(t, params, gating.GateStackConfig(("point",)))
        ref, _ = gating.point_gate(t, params["point"])
        assert np.array_equal(out.features, ref.features)

    def test_orders_differ_but_both_shrink(self, rng):
        c = 4
        feats = rng.normal(0, 1, (6, c))
        t = line_tensor(range(6), channels=c).with_features(feats)
        params = self.params(rng, c)
        cp, _ = gating.gate_stack(t, params, gating.GateStackConfig(("channel", "point")))
        pc, _ = gating.gate_stack(t, params, gating.GateStackConfig(("point", "channel")))
        assert np.abs(cp.features - pc.features).max() > 1e-9
        assert np.all(np.abs(cp.features) <= np.abs(feats) + 1e-15)
        assert np.all(np.abs(pc.features) <= np.abs(feats) + 1e-15)

    def test_magnitudes_never_grow(self, rng):
        for _ in range(50):
            c = int(rng.integers(1, 6))
            n = int(rng.integers(1, 10))
            feats = rng.normal(0, 2, (n, c))
            t = line_tensor(range(n), channels=c).with_features(feats)
            out, attn = gating.gate_stack(t, self.params(rng, c),
                                          gating.GateStackConfig())
            assert np.all(np.abs(out.features) <= np.abs(feats))
            assert set(attn) == {"channel", "point"}
