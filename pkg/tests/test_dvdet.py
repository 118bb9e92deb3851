from __future__ import annotations

import math

import numpy as np
import pytest

from dvdet.ast_graph import WeightedCodeGraph
from dvdet.cfg import ControlFlowPath
from dvdet.errors import CheckpointError, DomainError, InputFormatError
from dvdet.model import (
    DVDet,
    FusionParams,
    Sample,
    TrainConfig,
    batch_loss,
    evaluate,
    fuse_predict,
    kfold_indices,
    kfold_split,
    load_model,
    loss,
    metrics_from_confusion,
    train,
)
from dvdet.nn import ParamStore, finite_diff_grad, max_relative_error, save_checkpoint, softmax
from oracles import fuse_reference

TINY = dict(graph_dims=(6, 5, 4), seq_dims=(6, 5, 4), dropout=0.0)


def tiny_sample(rng, label=0, n_nodes=5, cid="s") -> Sample:
    tiers = rng.choice([1.0, 1.25, 1.5, 2.0], size=n_nodes).tolist()
    edges = [(i - 1, i) for i in range(1, n_nodes)]
    g = WeightedCodeGraph.from_tiers(tiers, edges, rng.normal(size=(n_nodes, 6)))
    paths = [
        ControlFlowPath((0, 1), ("PUSH1", "CALLVALUE", "JUMPI", "STOP")),
        ControlFlowPath((0, 2), ("PUSH1", "CALLVALUE", "JUMPI", "JUMPDEST", "CALL")),
    ]
    return Sample(cid, g, paths, label)


class TestFusion:
    def test_zero_params_uniform(self):
        p = fuse_predict(np.ones(3), np.ones(2), FusionParams(np.zeros((5, 2)), np.zeros(2)))
        assert p.tolist() == [0.5, 0.5]

    def test_bias_dominates(self):
        rng = np.random.default_rng(0)
        params = FusionParams(np.zeros((5, 3)), np.array([50.0, 0.0, 0.0]))
        for _ in range(10):
            assert int(np.argmax(fuse_predict(rng.normal(size=3), rng.normal(size=2), params))) == 0

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_formula(self, seed):
        rng = np.random.default_rng(seed)
        xg, hs = rng.normal(size=4), rng.normal(size=3)
        W, b = rng.normal(size=(7, 4)), rng.normal(size=4)
        p = fuse_predict(xg, hs, FusionParams(W, b))
        assert np.max(np.abs(p - fuse_reference(xg, hs, W, b))) < 1e-12
        assert abs(p.sum() - 1.0) < 1e-9

    def test_dim_mismatch(self):
        with pytest.raises(DomainError):
            fuse_predict(np.ones(3), np.ones(3), FusionParams(np.zeros((5, 2)), np.zeros(2)))


class TestLoss:
    def test_examples(self):
        assert loss(np.array([0.0, 1.0]), 1) == 0.0
        assert loss(np.full(4, 0.25), 2) == pytest.approx(math.log(4), abs=1e-12)

    def test_batch_mean(self):
        rng = np.random.default_rng(1)
        ps = [softmax(rng.normal(size=3)) for _ in range(3)]
        ys = [0, 2, 1]
        assert batch_loss(ps, ys) == pytest.approx(sum(loss(p, y) for p, y in zip(ps, ys)) / 3, abs=1e-15)


class TestKfold:
    def test_balanced_one_per_class(self):
        labels = [0, 1, 2] * 3
        for train_idx, val in kfold_indices(labels, 3, seed=4):
            assert sorted(labels[i] for i in val) == [0, 1, 2]
            assert len(train_idx) == 6

    def test_sizes_largest_first(self):
        parts = kfold_indices([0] * 5 + [1] * 5, 3, seed=0)
        assert [len(v) for _, v in parts] == [4, 3, 3]

    def test_partition(self):
        labels = list(np.random.default_rng(2).integers(0, 4, size=23))
        parts = kfold_indices(labels, 3, seed=9)
        vals = [set(v) for _, v in parts]
        assert set().union(*vals) == set(range(23))
        assert sum(len(v) for v in vals) == 23
        for tr, va in parts:
            assert not set(tr) & set(va) and len(tr) + len(va) == 23

    def test_deterministic(self):
        labels = [0, 1] * 7
        assert kfold_indices(labels, 3, 5) == kfold_indices(labels, 3, 5)
        assert kfold_indices(labels, 3, 5) != kfold_indices(labels, 3, 6)

    def test_errors(self):
        with pytest.raises(DomainError):
            kfold_indices([0, 1], 3)
        with pytest.raises(DomainError):
            kfold_indices([0, 1, 0], 1)

    def test_split_samples(self):
        rng = np.random.default_rng(3)
        samples = [tiny_sample(rng, i % 2, cid=str(i)) for i in range(6)]
        for tr, va in kfold_split(samples, 3):
            assert {s.contract_id for s in tr} | {s.contract_id for s in va} == {str(i) for i in range(6)}


class TestMetrics:
    def test_hand_3x3(self):
        C = [[5, 1, 0], [2, 3, 1], [0, 0, 4]]
        m = metrics_from_confusion(C, ("safe", "A", "B"))
        assert m.accuracy == pytest.approx(12 / 16)
        assert m.recall == pytest.approx([5 / 6, 3 / 6, 4 / 4])
        # one-vs-rest for class A: fp = 1, fn = 3
        assert m.class_accuracy == pytest.approx([(16 - 2 - 1) / 16, (16 - 1 - 3) / 16, (16 - 1 - 0) / 16])
        # safe rows/cols against the rest: 5 + (3 + 1 + 0 + 4)
        assert m.existence_accuracy == pytest.approx(13 / 16)
        assert [sum(r) for r in m.confusion] == [6, 6, 4]

    def test_all_correct(self):
        m = metrics_from_confusion([[3, 0], [0, 2]], ("safe", "vulnerable"))
        assert m.accuracy == 1.0 and m.recall == [1.0, 1.0]

    def test_constant_predictor(self):
        m = metrics_from_confusion([[4, 0], [4, 0]], ("safe", "vulnerable"))
        assert m.accuracy == 0.5 and m.recall == [1.0, 0.0]

    def test_null_recall(self):
        m = metrics_from_confusion([[2, 1, 0], [0, 1, 0], [0, 0, 0]], ("safe", "A", "B"))
        assert m.recall[2] is None
        assert m.to_dict()["recall"]["B"] is None

    def test_no_safe_class(self):
        assert metrics_from_confusion([[1, 0], [0, 1]], ("x", "y")).existence_accuracy is None

    def test_empty(self):
        with pytest.raises(DomainError):
            metrics_from_confusion([[0, 0], [0, 0]], ("a", "b"))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr0, c.dropout, c.batch_size, c.epochs, c.folds) == (0.01, 0.5, 32, 50, 3)
        assert c.graph_dims == (768, 256, 256, 128) and c.seq_dims == (350, 256, 256)
        assert c.classes == ("safe", "ReEn", "LoWc", "AcCl")
        assert TrainConfig(task="existence").classes == ("safe", "vulnerable")

    def test_labels(self):
        c = TrainConfig(task="existence")
        assert c.label_index("ReEn") == 1 and c.label_index("safe") == 0
        with pytest.raises(InputFormatError):
            TrainConfig().label_index("Unknown")

    @pytest.mark.parametrize("bad", [dict(mode="x"), dict(task="y"), dict(dropout=1.0), dict(epochs=-1)])
    def test_invalid(self, bad):
        with pytest.raises(DomainError):
            TrainConfig(**bad)

    def test_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('seed = 7\nmode = "source-only"\nepochs = 3\n')
        c = TrainConfig.from_toml(p, epochs=5)
        assert (c.seed, c.mode, c.epochs) == (7, "source-only", 5)
        p.write_text("nope = 1\n")
        with pytest.raises(InputFormatError, match="nope"):
            TrainConfig.from_toml(p)
        assert TrainConfig.from_dict(c.to_dict()) == c


class TestModel:
    def test_probabilities(self):
        rng = np.random.default_rng(4)
        model = DVDet(TrainConfig(**TINY))
        store = model.init_params()
        p, norms = model.predict(store, tiny_sample(rng))
        assert p.shape == (4,) and abs(p.sum() - 1.0) < 1e-9
        assert norms[0] > 0 and norms[1] > 0

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        model = DVDet(TrainConfig(**TINY))
        store = model.init_params()
        samples = [tiny_sample(rng, i % 4) for i in range(5)]
        ps, _ = model.forward_batch(store, samples)
        for s, p in zip(samples, ps):
            assert np.allclose(model.predict(store, s)[0], p, atol=1e-13)

    def test_full_gradient_check(self):
        rng = np.random.default_rng(6)
        model = DVDet(TrainConfig(**TINY))
        store = model.init_params()
        samples = [tiny_sample(rng, 1), tiny_sample(rng, 3, n_nodes=3)]
        store.zero_grad()
        model.accumulate_gradients(store, samples, training=False)
        numeric = finite_diff_grad(lambda s: model.batch_loss(s, samples), store)
        for name in store:
            assert max_relative_error(store[name].grad, numeric[name], floor=1e-6) < 1e-4, name

    @pytest.mark.parametrize("mode,silent", [("source-only", "seq"), ("bytecode-only", "graph")])
    def test_ablation_zero_gradient(self, mode, silent):
        rng = np.random.default_rng(7)
        model = DVDet(TrainConfig(mode=mode, **TINY))
        store = model.init_params()
        store.zero_grad()
        model.accumulate_gradients(store, [tiny_sample(rng, 0), tiny_sample(rng, 2)])
        dead = model.seq_param_names if silent == "seq" else model.graph_param_names
        live = model.graph_param_names if silent == "seq" else model.seq_param_names
        assert all(not np.any(store[n].grad) for n in dead)
        assert any(np.any(store[n].grad) for n in live)
        _, norms = model.predict(store, tiny_sample(rng))
        assert norms[1 if silent == "seq" else 0] == 0.0

    def test_missing_view_is_zero(self):
        rng = np.random.default_rng(8)
        model = DVDet(TrainConfig(**TINY))
        store = model.init_params()
        s = tiny_sample(rng)
        s.graph = None
        _, norms = model.predict(store, s)
        assert norms[0] == 0.0


class TestTrain:
    def test_zero_epochs_returns_init(self):
        rng = np.random.default_rng(9)
        config = TrainConfig(epochs=0, **TINY)
        res = train([tiny_sample(rng)], config)
        init = DVDet(config).init_params()
        assert res.history == []
        for n in init:
            assert np.array_equal(res.store.value(n), init.value(n))

    def test_empty(self):
        with pytest.raises(DomainError):
            train([], TrainConfig(**TINY))

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        samples = [tiny_sample(rng, i % 4, cid=str(i)) for i in range(8)]
        config = TrainConfig(epochs=3, batch_size=3, **dict(TINY, dropout=0.5))
        a = train(samples[:6], config, samples[6:])
        b = train(samples[:6], config, samples[6:])
        assert a.history == b.history and a.best_epoch == b.best_epoch
        for n in a.store:
            assert a.store.value(n).tobytes() == b.store.value(n).tobytes()

    def test_learns_and_evaluates(self, toy_samples, small_config):
        res = train(toy_samples, TrainConfig(**dict(small_config.to_dict(), epochs=30)))
        m = evaluate(res.model, res.store, toy_samples)
        assert m.accuracy > 0.5
        assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        config = TrainConfig(epochs=1, **TINY)
        res = train([tiny_sample(rng)], config, checkpoint_path=tmp_path / "m.ckpt")
        model, store = load_model(tmp_path / "m.ckpt")
        assert model.config == config
        s = tiny_sample(rng)
        assert np.array_equal(model.predict(store, s)[0], res.model.predict(res.store, s)[0])


class TestLoadModel:
    def test_no_config(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", ParamStore(), {})
        with pytest.raises(CheckpointError, match="no model config"):
            load_model(tmp_path / "m.ckpt")

    def test_shape_mismatch(self, tmp_path):
        config = TrainConfig(**TINY)
        store = DVDet(config).init_params()
        wrong = TrainConfig(**dict(TINY, graph_dims=(6, 7, 4)))
        save_checkpoint(tmp_path / "m.ckpt", store, {"config": wrong.to_dict()})
        with pytest.raises(CheckpointError, match="shape"):
            load_model(tmp_path / "m.ckpt")

    def test_evaluate_rejects_incompatible(self):
        store = DVDet(TrainConfig(**TINY)).init_params()
        other = DVDet(TrainConfig(**dict(TINY, seq_dims=(6, 3, 4))))
        with pytest.raises(CheckpointError):
            evaluate(other, store, [tiny_sample(np.random.default_rng(0))])
