import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpqsearch import autodiff as ad
from mpqsearch.autodiff import Tensor, finite_diff_check
from mpqsearch.model import build_model, parse_layers
from mpqsearch.quant import BitwidthSpace, BranchImportance
from mpqsearch.risk import (
    CostModel,
    capacity_p,
    complexity_risk,
    complexity_risk_t,
    generalization_risk,
    generalization_risk_t,
    policy_p,
    total_risk,
)
from mpqsearch.search import SearchConfig, SearchState, frozen, risk_graph

BIG = 1e6


def one_hot(bits, choice):
    return Tensor(np.where(np.asarray(bits) == choice, BIG, -BIG).astype(float))


def importance_for(space, picks):
    return BranchImportance(
        [one_hot(space.w_bits[k], w) for k, (w, _) in enumerate(picks)],
        [one_hot(space.a_bits[k], a) for k, (_, a) in enumerate(picks)],
    )


class TestComplexity:
    def test_one_hot(self):
        space = BitwidthSpace([0], [(2, 4)], [(2, 4)])
        assert complexity_risk(importance_for(space, [(4, 4)]), space, CostModel((100,))) == 1600.0

    def test_uniform_weight_branches(self):
        space = BitwidthSpace([0], [(2, 4)], [(2, 4)])
        imp = BranchImportance([Tensor([0.0, 0.0])], [one_hot((2, 4), 4)])
        assert complexity_risk(imp, space, CostModel((100,))) == pytest.approx(1200.0, abs=1e-9)

    def test_additive(self):
        space = BitwidthSpace([0, 2], [(2, 4)] * 2, [(2, 4)] * 2)
        imp = importance_for(space, [(4, 4), (2, 4)])
        assert complexity_risk(imp, space, CostModel((100, 50))) == 1600.0 + 400.0

    def test_tensor_matches_float(self):
        rng = np.random.default_rng(0)
        space = BitwidthSpace.uniform([0, 3], (2, 3, 4), (2, 4, 8))
        imp = BranchImportance.zeros(space)
        for t in imp.tensors():
            t.data[:] = rng.normal(size=t.shape)
        cost = CostModel((123, 456))
        assert complexity_risk_t(imp, space, cost).item() == pytest.approx(complexity_risk(imp, space, cost), rel=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        space = BitwidthSpace.uniform([0, 3], (2, 3, 4), (2, 4, 8))
        imp = BranchImportance.zeros(space)
        for t in imp.tensors():
            t.data[:] = rng.normal(size=t.shape)
        cost = CostModel((7, 11))
        for t in imp.tensors():
            assert finite_diff_check(lambda: complexity_risk_t(imp, space, cost), t) < 1e-6

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 1), st.integers(1, 2), st.floats(0.01, 0.99))
    def test_increasing_toward_larger_bitwidth(self, seed, lo, hi, frac):
        if hi <= lo:
            hi = lo + 1
        space = BitwidthSpace([0], [(2, 3, 4)], [(2, 3, 4)])
        rng = np.random.default_rng(seed)
        pi = rng.dirichlet(np.ones(3))
        a_logits = Tensor(rng.normal(size=3))
        before = complexity_risk(BranchImportance([Tensor(np.log(pi))], [a_logits]), space, CostModel((10,)))
        moved = pi.copy()
        moved[lo] -= frac * pi[lo]
        moved[hi] += frac * pi[lo]
        after = complexity_risk(BranchImportance([Tensor(np.log(moved))], [a_logits]), space, CostModel((10,)))
        assert after > before

    def test_one_hot_equals_policy_bops(self):
        space = BitwidthSpace([0, 3], [(2, 4, 8)] * 2, [(2, 4, 8)] * 2)
        imp = importance_for(space, [(8, 2), (4, 4)])
        assert complexity_risk(imp, space, CostModel((10, 20))) == 8 * 2 * 10 + 4 * 4 * 20

    def test_cost_model_from_layers(self):
        m = build_model(parse_layers("conv4x3 relu maxpool conv6x3 relu gap linear", 2), (3, 8, 8), 2, 0)
        cost = CostModel.from_model(m, BitwidthSpace.uniform([0, 3], (2,), (2,)))
        assert cost.macs == (4 * 3 * 9 * 64, 6 * 4 * 9 * 16)
        with pytest.raises(ValueError):
            CostModel((0,))


class TestCapacity:
    def space(self, n=1):
        return BitwidthSpace.uniform(list(range(n)), (2, 4), (3, 6))

    def test_reference_point(self):
        assert capacity_p(importance_for(self.space(), [(4, 6)]), self.space()) == 1.0

    def test_low_bits(self):
        assert capacity_p(importance_for(self.space(), [(2, 3)]), self.space()) == 4.0

    def test_two_layer_average(self):
        assert capacity_p(importance_for(self.space(2), [(4, 6), (2, 3)]), self.space(2)) == 2.5

    def test_policy_p(self):
        assert policy_p([4, 2], [6, 3]) == 2.5

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 1), st.floats(0.01, 3.0))
    def test_decreasing_in_expected_bits(self, seed, which, delta):
        space = BitwidthSpace.uniform([0, 1], (2, 4), (3, 6))
        rng = np.random.default_rng(seed)
        imp = BranchImportance([Tensor(rng.normal(size=2)) for _ in range(2)], [Tensor(rng.normal(size=2)) for _ in range(2)])
        before = capacity_p(imp, space)
        target = imp.w_logits[1] if which == 0 else imp.a_logits[0]
        target.data[1] += delta
        assert capacity_p(imp, space) < before


class TestGeneralization:
    def test_zero_at_target(self):
        f = np.array([0.2, 0.8])
        target = f**2 / (f**2).sum()
        assert generalization_risk(target, f, 2, 2) == pytest.approx(0.0, abs=1e-15)

    def test_spot_value(self):
        assert generalization_risk([0.0, 1.0], [0.2, 0.8], 1, 2) == pytest.approx(0.08, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(1, 4), st.integers(1, 25))
    def test_scale_invariant_and_nonnegative(self, seed, c, p, k):
        rng = np.random.default_rng(seed)
        q, f = rng.uniform(0.01, 1, (5, 5)), rng.uniform(0.01, 1, (5, 5))
        r = generalization_risk(q, f, p, k)
        assert r >= 0
        assert generalization_risk(c * q, f, p, k) == pytest.approx(r, rel=1e-9, abs=1e-15)

    def test_degenerate_reference_contributes_zero(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert generalization_risk([0.3, 0.7], [0.0, 0.0], 2) == 0.0
        assert "degenerate" in caplog.text

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(2)
        q, f = rng.uniform(0, 1, (4, 6, 6)), rng.uniform(0, 1, (4, 6, 6))
        f[3] = 0.0
        expected = np.mean([generalization_risk(q[i], f[i], 2.5, 10) for i in range(4)])
        got = generalization_risk_t(Tensor(q), f, 2.5, 10).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_batched_gradient(self):
        rng = np.random.default_rng(3)
        q = Tensor(rng.uniform(0.1, 1, (3, 4, 4)))
        f = rng.uniform(0, 1, (3, 4, 4))
        assert finite_diff_check(lambda: generalization_risk_t(q, f, 3.0, 7), q) < 1e-6


class TestTotal:
    def test_spot_value(self):
        b = total_risk(1, 2, 3, 0.1, 0.5)
        assert b.total == pytest.approx(2.7, abs=1e-15)
        assert (b.r_e, b.r_c, b.r_g, b.zeta, b.eta) == (1, 2, 3, 0.1, 0.5)

    def test_eta_zero_drops_attribution(self):
        assert total_risk(1.0, 2.0, 99.0, 0.1, 0.0).total == 1.0 + 0.2

    def test_task_loss_only(self):
        assert total_risk(1.25, 2.0, 3.0, 0.0, 0.0).total == 1.25


def toy_search(seed=0):
    """Two searched conv layers, small enough for element-wise finite differences."""
    rng = np.random.default_rng(seed)
    specs = parse_layers("conv3x3 relu conv4x3 relu gap linear", 3)
    fp = build_model(specs, (2, 6, 6), 3, seed)
    cfg = SearchConfig(zeta=1e-3, eta=5.0, topk=10, w_bits=(2, 4), a_bits=(3, 4))
    state = SearchState.init(fp, cfg)
    for t in state.params.tensors():
        t.data += rng.normal(0, 0.05, t.shape)
    for t in state.importance.tensors():
        t.data[:] = rng.normal(0, 0.5, t.shape)
    x = rng.normal(size=(4, 2, 6, 6))
    y = rng.integers(0, 3, 4)
    return state, frozen(fp), cfg, x, y


class TestFullRiskGradient:
    def test_finite_differences(self):
        state, fp, cfg, x, y = toy_search()
        # p is a constant of the graph by design, so hold it fixed while probing
        cfg.p_mode, cfg.p_fixed = "fixed", capacity_p(state.importance, state.space)
        f = lambda: risk_graph(state, x, y, fp, cfg)[0]  # noqa: E731
        last = len(state.space) - 1
        probes = [
            state.importance.w_logits[last],
            state.importance.a_logits[last],
            state.params.biases[state.params.last_conv],
        ]
        probes += [state.params.weights[i] for i in state.params.head_layers]
        probes += [state.params.biases[i] for i in state.params.head_layers]
        for t in probes:
            assert finite_diff_check(f, t) < 1e-4

    def test_each_term_reaches_logits(self):
        state, fp, cfg, x, y = toy_search(1)
        _, terms, _ = risk_graph(state, x, y, fp, cfg)
        for name in ("r_e", "r_c", "r_g"):
            for t in state.params.tensors() + state.importance.tensors():
                t.grad = None
            ad.backward(terms[name])
            assert any(t.grad is not None and np.any(t.grad != 0) for t in state.importance.tensors()), name
