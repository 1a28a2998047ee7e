import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailtransfer import cgae
from tailtransfer import gradcore as gc
from tailtransfer.cgae import TransferConfig
from tailtransfer.gradcore import Value

IDS = np.array([[0, 1, 2], [0, 1, 2], [0, 1, 3], [4, 0, 0]])


def symmetric_batch(rng, n=32, m=8, groups=4):
    c = Value(rng.normal(size=(n, m)), requires_grad=True)
    head = np.arange(n) % 2 == 0
    keys = (np.arange(n) // 2) % groups
    return c, head, keys


class TestDualTable:
    def test_shared_cluster_row(self):
        table = cgae.DualEmbeddingTable(IDS, 4, np.random.default_rng(0))
        c, d = table.lookup_dual([0, 1])
        np.testing.assert_array_equal(c.data[0], c.data[1])
        assert not np.array_equal(d.data[0], d.data[1])
        assert table.rows([0])[0] == table.rows([1])[0]
        assert len(table.keys) == 3

    def test_repeated_lookup_accumulates(self):
        table = cgae.DualEmbeddingTable(IDS, 4, np.random.default_rng(0))
        c, d = table.lookup_dual([0, 0, 1])
        gc.backward_pass(gc.add(gc.sum_(c), gc.sum_(d)))
        np.testing.assert_array_equal(table.C.grad[table.rows([0])[0]], np.full(4, 3.0))
        np.testing.assert_array_equal(table.D.grad[0], np.full(4, 2.0))
        np.testing.assert_array_equal(table.D.grad[1], np.full(4, 1.0))

    def test_zero_init(self):
        table = cgae.DualEmbeddingTable(IDS, 4, np.random.default_rng(0), init_scale=0.0)
        c, d = table.lookup_dual([2])
        assert not c.data.any() and not d.data.any()

    def test_unknown_entity(self):
        table = cgae.DualEmbeddingTable(IDS, 4, np.random.default_rng(0))
        with pytest.raises(cgae.OutOfVocabularyError):
            table.lookup_dual([4])

    def test_unknown_semantic_id(self):
        table = cgae.DualEmbeddingTable(IDS, 4, np.random.default_rng(0))
        with pytest.raises(cgae.OutOfVocabularyError):
            table.lookup_dual([0], semantic_ids=[[9, 9, 9]])

    def test_explicit_semantic_id(self):
        table = cgae.DualEmbeddingTable(IDS, 4, np.random.default_rng(0))
        c, _ = table.lookup_dual([3], semantic_ids=[[0, 1, 3]])
        np.testing.assert_array_equal(c.data, table.lookup_dual([2])[0].data)

    def test_needs_a_table(self):
        with pytest.raises(cgae.ConfigError):
            cgae.DualEmbeddingTable(IDS, 4, None, cluster=False, individual=False)


class TestTransferLoss:
    def test_hand_example(self):
        c = Value(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), requires_grad=True)
        loss, report = cgae.transfer_loss(c, [True, False, True], [0, 0, 1], TransferConfig(1.0, 1.0, 1.0),
                                          np.random.default_rng(0))
        assert loss.item() == pytest.approx(2 * -math.log(math.e / (math.e + 1)), abs=1e-12)
        assert loss.item() == pytest.approx(0.6265, abs=1e-4)
        assert report.tail_anchors == 1 and report.head_anchors == 1

    def test_no_pairs_is_exact_zero(self):
        c = Value(np.eye(3), requires_grad=True)
        loss, report = cgae.transfer_loss(c, [True, True, False], [0, 0, 1], TransferConfig(),
                                          np.random.default_rng(0))
        assert loss.item() == 0.0 and report.empty

    def test_aliased_rows_are_not_partners(self):
        c = Value(np.eye(3), requires_grad=True)
        loss, report = cgae.transfer_loss(c, [True, False, True], [0, 0, 1], TransferConfig(),
                                          np.random.default_rng(0), row_key=[5, 5, 6])
        assert report.empty and loss.item() == 0.0

    @pytest.mark.parametrize("kw", [{"tau": 0.0}, {"lambda1": -1.0}])
    def test_invalid_config(self, kw):
        with pytest.raises(cgae.ConfigError):
            TransferConfig(**kw)

    def test_default_weights_are_asymmetric(self):
        cfg = TransferConfig()
        assert cfg.lambda1 < cfg.lambda2

    def test_lambda1_zero_freezes_heads(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            c, head, keys = symmetric_batch(rng)
            loss, report = cgae.transfer_loss(c, head, keys, TransferConfig(0.0, 1.0), rng)
            gc.backward_pass(loss)
            assert report.tail_anchors > 0
            assert c.grad[head].tobytes() == np.zeros_like(c.grad[head]).tobytes()
            assert np.all(np.linalg.norm(c.grad[~head], axis=1) > 0)

    def test_lambda2_zero_freezes_tails(self):
        rng = np.random.default_rng(1)
        c, head, keys = symmetric_batch(rng)
        loss, _ = cgae.transfer_loss(c, head, keys, TransferConfig(1.0, 0.0), rng)
        gc.backward_pass(loss)
        assert c.grad[~head].tobytes() == np.zeros_like(c.grad[~head]).tobytes()

    def test_tails_move_more_than_heads(self):
        rng = np.random.default_rng(2)
        tails, heads = [], []
        for _ in range(100):
            c, head, keys = symmetric_batch(rng)
            loss, _ = cgae.transfer_loss(c, head, keys, TransferConfig(0.1, 1.0), rng)
            gc.backward_pass(loss)
            norms = np.linalg.norm(c.grad, axis=1)
            tails.append(norms[~head].mean())
            heads.append(norms[head].mean())
        assert np.mean(tails) > np.mean(heads)

    def test_tuple_keys_match_int_keys(self):
        rng = np.random.default_rng(3)
        c, head, keys = symmetric_batch(rng, n=8, groups=2)
        tuples = np.stack([keys, keys * 0 + 7], axis=1)
        a, _ = cgae.transfer_loss(c, head, keys, TransferConfig(), np.random.default_rng(9))
        b, _ = cgae.transfer_loss(c, head, tuples, TransferConfig(), np.random.default_rng(9))
        assert a.item() == b.item()

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        c, head, keys = symmetric_batch(rng, n=8, m=3, groups=2)
        pick = np.random.default_rng(100 + seed)
        state = pick.bit_generator.state
        # stop-gradient targets are constants of the graph, so freeze them for the probe
        targets = c.data / np.linalg.norm(c.data, axis=1, keepdims=True)

        def f():
            pick.bit_generator.state = state
            return cgae.transfer_loss(c, head, keys, TransferConfig(0.3, 1.0, 0.5), pick,
                                      frozen_targets=targets)[0]

        assert gc.finite_difference_check(f, [c]) < 1e-4


class TestOrthoLoss:
    @pytest.mark.parametrize("c,d,want", [
        ([1.0, 0.0], [0.0, 1.0], 0.0),
        ([1.0, 1.0], [1.0, 1.0], 1.0),
        ([1.0, 0.0], [1.0, 1.0], 0.5),
    ])
    def test_examples(self, c, d, want):
        loss, _ = cgae.ortho_loss(np.array(c), np.array(d))
        assert loss.item() == pytest.approx(want, abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_parallel_rows_stay_in_range(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=(3, 6)) * rng.uniform(1e-3, 1e3)
        loss = cgae.ortho_loss(c, c * rng.uniform(-5, 5))[0].item()
        assert 0.0 <= loss <= 1.0

    def test_degenerate_zero(self):
        loss, degenerate = cgae.ortho_loss(np.zeros((2, 3)), np.zeros((2, 3)))
        assert loss.item() == 0.0 and degenerate == 2

    def test_zero_rows_have_finite_gradient(self):
        c = Value(np.zeros((1, 3)), requires_grad=True)
        d = Value(np.zeros((1, 3)), requires_grad=True)
        gc.backward_pass(cgae.ortho_loss(c, d)[0])
        assert np.all(np.isfinite(c.grad)) and np.all(np.isfinite(d.grad))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_scale_invariant(self, seed):
        rng = np.random.default_rng(seed)
        c, d = rng.normal(size=5), rng.normal(size=5)
        a, b = rng.uniform(0.1, 10.0, size=2)
        base = cgae.ortho_loss(c, d)[0].item()
        assert cgae.ortho_loss(a * c, b * d)[0].item() == pytest.approx(base, abs=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        c = Value(rng.normal(size=(4, 3)), requires_grad=True)
        d = Value(rng.normal(size=(4, 3)), requires_grad=True)
        assert gc.finite_difference_check(lambda: cgae.ortho_loss(c, d)[0], [c, d]) < 1e-4


class TestGateFuse:
    def test_boundaries(self):
        c, d = np.array([2.0, 0.0]), np.array([0.0, 2.0])
        np.testing.assert_array_equal(cgae.gate_fuse(c, d, 1.0).data, c)
        np.testing.assert_array_equal(cgae.gate_fuse(c, d, 0.0).data, d)
        np.testing.assert_array_equal(cgae.gate_fuse(c, d, 0.5).data, [1.0, 1.0])

    def test_gate_in_open_interval(self):
        gate = cgae.ActivityGate(3, np.random.default_rng(0))
        r = gate(np.random.default_rng(1).normal(size=(50, 3)) * 5)
        assert np.all((r.data > 0) & (r.data < 1))

    def test_fixed_gate(self):
        gate = cgae.ActivityGate(3, np.random.default_rng(0), fixed=0.5)
        np.testing.assert_array_equal(gate(np.ones((4, 3))).data, np.full((4, 1), 0.5))
        assert gate.num_parameters() == 0

    def test_nonfinite_features(self):
        gate = cgae.ActivityGate(3, np.random.default_rng(0))
        with pytest.raises(cgae.InputError):
            gate(np.array([[np.nan, 0.0, 0.0]]))

    def test_gradients_reach_all_parts(self):
        rng = np.random.default_rng(0)
        model = cgae.CGAE(IDS, rng.normal(size=(4, 3)), 4, rng)
        e, r, c, d = model.embed([0, 2])
        gc.backward_pass(gc.sum_(gc.square(e)))
        assert np.any(model.table.C.grad) and np.any(model.table.D.grad)
        assert all(np.any(p.grad) for p in model.gate.parameters())

    @pytest.mark.parametrize("seed", range(3))
    def test_module_gradient(self, seed):
        rng = np.random.default_rng(seed)
        model = cgae.CGAE(IDS, rng.normal(size=(4, 3)), 3, rng, init_scale=1.0)
        target = rng.normal(size=(3, 3))

        def f():
            e, _, c, d = model.embed([0, 1, 3])
            return gc.add(gc.mean(gc.square(gc.sub(e, target))), cgae.ortho_loss(c, d)[0])

        assert gc.finite_difference_check(f, model.parameters()) < 1e-4

    @pytest.mark.parametrize("mode,kw", [("cluster", {"individual": False}), ("individual", {"cluster": False})])
    def test_single_table_modes(self, mode, kw):
        rng = np.random.default_rng(0)
        model = cgae.CGAE(IDS, np.zeros((4, 3)), 4, rng, **kw)
        e, r, c, d = model.embed([1])
        assert model.mode == mode and model.gate is None and r is None
        np.testing.assert_array_equal(e.data, (c if mode == "cluster" else d).data)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_convexity(self, seed):
        rng = np.random.default_rng(seed)
        c, d, r = rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), rng.uniform(size=(4, 1))
        e = cgae.gate_fuse(c, d, r).data
        lo, hi = np.minimum(c, d), np.maximum(c, d)
        assert np.all(e >= lo - 1e-12) and np.all(e <= hi + 1e-12)
