import json
import logging
import os
from pathlib import Path

import numpy as np
import pytest

from mpqsearch.data import Dataset, generate_synthetic
from mpqsearch.model import accuracy, build_model, forward, parse_layers, train_fp_reference
from mpqsearch.quant import QuantPolicy, policy_hook
from mpqsearch.search import (
    METRIC_COLUMNS,
    SearchConfig,
    SearchState,
    evaluate,
    finetune,
    frozen,
    lr_at,
    risk_graph,
    run_search,
    search_step,
)

GOLDEN = Path(__file__).parent / "golden" / "zero_risk_policies.json"
ARCH = "conv4x3 relu maxpool conv6x3 relu gap linear"


@pytest.fixture(scope="module")
def toy():
    ds = generate_synthetic(2, 96, (3, 8, 8), seed=11, name="toy")
    m = build_model(parse_layers(ARCH, 2), ds.shape, 2, seed=0)
    fp, _ = train_fp_reference(m, ds, 3, 0.02, seed=0)
    return ds, fp


def quick(**kw):
    base = dict(epochs=1, batch_size=32, topk=20, w_bits=(2, 4), a_bits=(2, 4))
    base.update(kw)
    return SearchConfig(**base)


class TestSearchStep:
    def test_zero_learning_rates_leave_state(self, toy):
        ds, fp = toy
        cfg = quick(lr_weights=0.0, lr_logits=0.0, eta=1.0)
        state = SearchState.init(fp, cfg)
        before = state.snapshot()
        b = search_step(state, ds.images[:16], ds.labels[:16], frozen(fp), cfg)
        assert all(np.array_equal(x, y) for x, y in zip(before, state.snapshot()))
        assert np.isfinite(b.total) and b.r_e > 0 and b.r_c > 0

    def test_deterministic(self, toy):
        ds, fp = toy
        cfg = quick(eta=2.0)
        snaps = []
        for _ in range(2):
            state = SearchState.init(fp, cfg)
            for s in range(0, 48, 16):
                search_step(state, ds.images[s : s + 16], ds.labels[s : s + 16], frozen(fp), cfg)
            snaps.append(state.snapshot())
        assert all(a.tobytes() == b.tobytes() for a, b in zip(*snaps))

    def test_grads_cleared_and_both_groups_move(self, toy):
        ds, fp = toy
        cfg = quick(eta=1.0)
        state = SearchState.init(fp, cfg)
        before = state.snapshot()
        search_step(state, ds.images[:16], ds.labels[:16], frozen(fp), cfg)
        after = state.snapshot()
        n_w = len(state.params.tensors())
        assert any(not np.array_equal(a, b) for a, b in zip(before[:n_w], after[:n_w]))
        assert all(not np.array_equal(a, b) for a, b in zip(before[n_w:], after[n_w:]))
        assert all(t.grad is None or not np.any(t.grad) for t in state.params.tensors() + state.importance.tensors())

    def test_single_group_updates(self, toy):
        ds, fp = toy
        cfg = quick()
        state = SearchState.init(fp, cfg)
        n_w = len(state.params.tensors())
        before = state.snapshot()
        search_step(state, ds.images[:16], ds.labels[:16], frozen(fp), cfg, update="weights")
        after = state.snapshot()
        assert all(np.array_equal(a, b) for a, b in zip(before[n_w:], after[n_w:]))
        search_step(state, ds.images[:16], ds.labels[:16], frozen(fp), cfg, update="logits")
        final = state.snapshot()
        assert all(np.array_equal(a, b) for a, b in zip(after[:n_w], final[:n_w]))

    def test_fifty_steps_reduce_risk(self, toy):
        ds, fp = toy
        x, y = ds.images[:64], ds.labels[:64]
        cfg = quick(eta=1.0, zeta=1e-6)
        state = SearchState.init(fp, cfg)
        totals = [search_step(state, x, y, frozen(fp), cfg).total for _ in range(50)]
        assert totals[-1] < totals[0]

    def test_non_finite_risk_aborts(self, toy):
        ds, fp = toy
        cfg = quick()
        state = SearchState.init(fp, cfg)
        state.params.weights[state.params.head_layers[-1]].data[0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="r_e"):
            search_step(state, ds.images[:8], ds.labels[:8], frozen(fp), cfg)

    def test_eta_zero_still_reports_attribution_risk(self, toy):
        ds, fp = toy
        cfg = quick(eta=0.0)
        state = SearchState.init(fp, cfg)
        total, terms, _ = risk_graph(state, ds.images[:8], ds.labels[:8], frozen(fp), cfg)
        assert terms["r_g"].item() >= 0
        assert total.item() == pytest.approx(terms["r_e"].item() + cfg.zeta * terms["r_c"].item(), rel=1e-14)


class TestRunSearch:
    def test_trace_rows_match_steps(self, toy):
        ds, fp = toy
        res = run_search(quick(epochs=2), ds, fp)
        assert len(res.trace) == res.state.step == 2 * 3
        assert list(res.trace[0]) == list(METRIC_COLUMNS)

    def test_huge_zeta_gives_minimum_bits(self, toy):
        ds, fp = toy
        res = run_search(quick(zeta=1.0, eta=0.0, w_bits=(2, 3, 4), a_bits=(2, 3, 4)), ds, fp)
        assert set(res.policy.w_bits) == {2} and set(res.policy.a_bits) == {2}

    def test_budget_flag(self, toy, caplog):
        ds, fp = toy
        res = run_search(quick(), ds, fp)
        exact = run_search(quick(bops_budget=res.bops), ds, fp)
        assert not exact.budget_exceeded and exact.policy.meta["budget_exceeded"] is False
        with caplog.at_level(logging.WARNING):
            under = run_search(quick(bops_budget=res.bops - 1), ds, fp)
        assert under.budget_exceeded and "exceed" in caplog.text
        assert not run_search(quick(), ds, fp).budget_exceeded

    def test_empty_dataset(self, toy):
        _, fp = toy
        empty = Dataset(np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int), 2)
        with pytest.raises(ValueError, match="empty"):
            run_search(quick(), empty, fp)

    def test_alternating_mode(self, toy):
        ds, fp = toy
        res = run_search(quick(val_split=True), ds, fp)
        # 86 training samples in batches of 32, each followed by one validation step
        assert len(res.trace) == 3 and res.state.step == 6

    def test_policy_metadata(self, toy):
        ds, fp = toy
        res = run_search(quick(), ds, fp, dataset_id="toy-A")
        meta = res.policy.meta
        assert meta["dataset"] == "toy-A" and meta["search"]["eta"] == 1.0 and meta["bops"] == res.bops


def zero_risk_policy(ds, fp, seed):
    res = run_search(quick(zeta=0.0, eta=0.0, epochs=2, seed=seed, w_bits=(2, 3, 4), a_bits=(2, 3, 4)), ds, fp)
    return {"w_bits": res.policy.w_bits, "a_bits": res.policy.a_bits}


def test_task_loss_only_policies_match_golden(toy):
    ds, fp = toy
    got = {str(seed): zero_risk_policy(ds, fp, seed) for seed in range(3)}
    if os.environ.get("MPQ_REGEN_GOLDEN"):
        GOLDEN.parent.mkdir(exist_ok=True)
        GOLDEN.write_text(json.dumps(got, indent=2, sort_keys=True) + "\n")
    assert got == json.loads(GOLDEN.read_text())


class TestFinetune:
    def test_lr_schedule(self):
        assert [lr_at(e, 8, 1.0) for e in range(8)] == [1.0] * 4 + [0.1] * 2 + [0.01] * 2

    def test_zero_epochs(self, toy):
        ds, fp = toy
        pol = QuantPolicy(fp.conv_layers, [2, 2], [2, 2])
        params, trace = finetune(pol, ds, 0, 1e-3, 0, fp)
        assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(params.tensors(), fp.tensors()))
        assert trace == [accuracy(fp, ds, policy_hook(fp, pol, 4.0))]

    def test_deterministic(self, toy):
        ds, fp = toy
        pol = QuantPolicy(fp.conv_layers, [2, 3], [3, 2])
        a, ta = finetune(pol, ds, 2, 1e-3, 5, fp)
        b, tb = finetune(pol, ds, 2, 1e-3, 5, fp)
        assert ta == tb and all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.tensors(), b.tensors()))

    def test_high_precision_policy_tracks_reference(self):
        ds = generate_synthetic(2, 200, (3, 8, 8), seed=21, noise=0.6, amplitude=0.5)
        m = build_model(parse_layers(ARCH, 2), ds.shape, 2, seed=1)
        fp, _ = train_fp_reference(m, ds, 4, 0.02, seed=0)
        pol = QuantPolicy(fp.conv_layers, [16, 16], [16, 16])
        _, trace = finetune(pol, ds, 2, 1e-3, 0, fp, act_max=16.0)
        assert abs(trace[-1] - accuracy(fp, ds)) <= 0.05

    def test_mismatched_policy(self, toy):
        ds, fp = toy
        with pytest.raises(ValueError, match=r"\[1\]"):
            finetune(QuantPolicy([1], [2], [2]), ds, 1, 1e-3, 0, fp)


class TestEvaluate:
    def test_reference_against_itself(self, toy):
        ds, fp = toy
        res = evaluate(fp, None, ds, fp)
        assert res.mean_ard == 0.0
        assert res.accuracy == accuracy(fp, ds)

    def test_perfect_classifier(self, toy):
        ds, fp = toy
        logits, _ = forward(fp, ds.images)
        keep = logits.data.argmax(axis=1) == ds.labels
        assert evaluate(fp, None, ds.subset(np.nonzero(keep)[0]), fp).accuracy == 1.0

    def test_all_four_bit_bops(self, toy):
        ds, fp = toy
        pol = QuantPolicy(fp.conv_layers, [4, 4], [4, 4])
        total = sum(fp.macs()[i] for i in fp.conv_layers)
        assert evaluate(fp, pol, ds.subset(range(8)), fp).bops == 16 * total
        assert evaluate(fp, None, ds.subset(range(8)), fp).bops == 32 * 32 * total
