import json

import numpy as np
import pytest

from dragonfly import layers as L
from dragonfly.frustum import EnsembleSpec, build_dragonfly, forward_all
from dragonfly.geometron import generate
from dragonfly.metrics import perf_tensor
from dragonfly.training import (
    CheckpointError,
    TrainConfig,
    confusion_matrix,
    decide,
    evaluate,
    evaluate_probs,
    init_params,
    load_checkpoint,
    monte_carlo,
    save_checkpoint,
    train,
)

DIMS = (16, 16, 1)


@pytest.fixture(scope="module")
def tiny():
    return generate(1, (12, 2, 6), seed=0, size=16)


def _graph(classes=2, **kw):
    return build_dragonfly(classes, DIMS, 0.125, **kw)[1]


def _snapshot(graph):
    return {n: p.data.copy() for n, p in graph.named_parameters()}


class TestInit:
    def test_same_seed_identical(self):
        a, b = _graph(), _graph()
        init_params(a, 7)
        init_params(b, 7)
        sa, sb = _snapshot(a), _snapshot(b)
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_different_seed_differs(self):
        a, b = _graph(), _graph()
        init_params(a, 1)
        init_params(b, 2)
        sa, sb = _snapshot(a), _snapshot(b)
        assert max(np.max(np.abs(sa[k] - sb[k])) for k in sa) > 0

    def test_conv_std_near_he_scale(self):
        g = build_dragonfly(2, (32, 32, 1), 1.0)[1]
        init_params(g, 0)
        for m in g.modules():
            if isinstance(m, L.Conv2D):
                target = np.sqrt(2.0 / m.fan_in)
                assert target / 2 < m.weight.data.std() < 2 * target

    def test_integrator_weights(self):
        g = _graph()
        init_params(g, 3)
        for integ in g.integrators:
            b, k = len(integ.branches), 2
            w = integ.weight.data
            for j in range(b):
                block = w[:, j * k:(j + 1) * k]
                assert np.all(block[~np.eye(k, dtype=bool)] == 0)
                d = np.diag(block)
                assert np.all(d >= 0.5 / b) and np.all(d <= 1.5 / b)

    def test_scalar_integrator_weights(self):
        g = _graph(integrator_mode=L.SCALAR)
        init_params(g, 3)
        w = g.integrators[-1].weight.data
        assert w.shape == (16,) and np.all((w >= 0.5 / 16) & (w <= 1.5 / 16))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lr=-1), dict(batch_size=0), dict(epochs=0),
                                    dict(loss="mse"), dict(momentum=1.0), dict(width_scale=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestEvaluate:
    def test_perfect_predictor(self):
        y = np.array([0, 1, 1, 0, 2])
        ev = evaluate_probs(np.eye(3)[y], y)
        assert ev.accuracy["N1"] == 100.0
        cm = ev.confusion["N1"]
        assert np.array_equal(cm, np.diag(np.diag(cm)))

    def test_uniform_predictor_ties_to_class_zero(self):
        y = np.array([0, 1] * 5)
        ev = evaluate_probs(np.full((10, 2), 0.5), y)
        assert ev.accuracy["N1"] == 50.0
        assert np.all(decide(np.full((10, 2), 0.5)) == 0)
        assert ev.confusion["N1"][:, 1].sum() == 0

    def test_accuracy_is_trace_over_total(self):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(4), (17, 50))
        y = rng.integers(0, 4, 50)
        ev = evaluate_probs(probs, y)
        for h in range(1, 18):
            cm = ev.confusion[f"N{h}"]
            assert ev.accuracy[f"N{h}"] == pytest.approx(100 * np.trace(cm) / cm.sum())
            assert cm.sum() == 50

    def test_confusion_counts(self):
        cm = confusion_matrix([0, 0, 1], [0, 1, 1], 2)
        assert cm.tolist() == [[1, 1], [0, 1]]

    def test_deterministic(self, tiny):
        g = _graph()
        init_params(g, 0)
        x, y = tiny.split("test")
        assert evaluate(g, x, y).accuracy == evaluate(g, x, y).accuracy


class TestTrain:
    def test_zero_lr_leaves_parameters(self, tiny):
        g = _graph()
        init_params(g, 4)
        before = _snapshot(g)
        res = train(g, tiny, TrainConfig(lr=0.0, epochs=2, batch_size=8, seed=4))
        after = _snapshot(g)
        assert all(np.array_equal(before[k], after[k]) for k in before)
        # same parameters and the same batch-norm statistics give the same accuracy
        fresh = _graph()
        init_params(fresh, 4)
        for name, buf in g.named_buffers():
            fresh.set_buffer(name, buf.copy())
        x, y = tiny.split("test")
        assert res.accuracy["test"] == evaluate(fresh, x, y).accuracy

    def test_one_step_moves_every_branch(self):
        g = _graph()
        init_params(g, 5)
        convs = [[p for m in br.modules() if isinstance(m, (L.Conv2D, L.DepthwiseSeparable))
                  for p in m.parameters()] for br in g.branches]
        before = [[p.data.copy() for p in ps] for ps in convs]
        small = generate(1, (4, 1, 1), seed=1, size=16)  # 8 samples: one batch, one step
        res = train(g, small, TrainConfig(lr=0.01, epochs=1, batch_size=8, seed=5), init=False)
        assert len(res.step_loss) == 1
        for ps, old in zip(convs, before):
            assert ps and all(not np.array_equal(p.data, o) for p, o in zip(ps, old))

    def test_loss_finite_and_decreasing(self, tiny):
        g = _graph()
        res = train(g, tiny, TrainConfig(lr=0.005, epochs=4, batch_size=8, seed=0))
        assert np.isfinite(res.step_loss).all()
        assert len(res.step_loss) == 4 * 3
        assert res.epoch_loss[-1] < res.epoch_loss[0]
        assert not res.diverged
        for split in ("train", "val", "test"):
            assert set(res.accuracy[split]) == {f"N{h}" for h in range(1, 18)}
            assert all(0 <= a <= 100 for a in res.accuracy[split].values())

    def test_bit_exact_rerun(self, tiny):
        cfg = TrainConfig(lr=0.005, epochs=1, batch_size=8, seed=2)
        a = train(_graph(), tiny, cfg)
        b = train(_graph(), tiny, cfg)
        assert a.step_loss == b.step_loss
        assert a.accuracy == b.accuracy

    def test_auxiliary_loss_flag_changes_objective(self, tiny):
        a = train(_graph(), tiny, TrainConfig(epochs=1, batch_size=8, seed=2))
        b = train(_graph(), tiny, TrainConfig(epochs=1, batch_size=8, seed=2, auxiliary_loss=True))
        assert a.step_loss[0] != b.step_loss[0]
        assert -5 <= b.step_loss[0] <= 5


class TestMonteCarlo:
    def test_single_trial_degenerate_tensor(self, tiny):
        spec = EnsembleSpec(2, DIMS)
        mc = monte_carlo(TrainConfig(epochs=1, batch_size=8), spec, tiny, n_trials=1, lrs=(0.005,))
        t = perf_tensor(mc.z())
        assert t.min == t.mean == t.median == t.max

    def test_order_insensitive(self, tiny):
        spec = EnsembleSpec(2, DIMS)
        cfg = TrainConfig(epochs=1, batch_size=8)
        a = monte_carlo(cfg, spec, tiny, seeds=[0, 1], lrs=(0.005,))
        b = monte_carlo(cfg, spec, tiny, seeds=[1, 0], lrs=(0.005,))
        assert sorted(a.z()) == sorted(b.z())
        assert [t.seed for t in b.trials] == [0, 1]

    def test_parallel_matches_serial(self, tiny):
        spec = EnsembleSpec(2, DIMS)
        cfg = TrainConfig(epochs=1, batch_size=8)
        a = monte_carlo(cfg, spec, tiny, n_trials=2, lrs=(0.001, 0.01), workers=1)
        b = monte_carlo(cfg, spec, tiny, n_trials=2, lrs=(0.001, 0.01), workers=2)
        assert a.z() == b.z()
        assert [(t.lr, t.seed) for t in a.trials] == [(0.001, 0), (0.001, 1), (0.01, 0), (0.01, 1)]
        assert set(a.z_by_lr()) == {0.001, 0.01}

    def test_failures_recorded_not_fatal(self, tiny):
        spec = EnsembleSpec(2, (8, 8, 1))  # wrong input extent for the dataset
        mc = monte_carlo(TrainConfig(epochs=1), spec, tiny, n_trials=2, lrs=(0.005,))
        assert len(mc.failures) == 2 and mc.z() == []
        assert all("ShapeError" in t.error for t in mc.failures)

    def test_checkpoints_written(self, tiny, tmp_path):
        spec = EnsembleSpec(2, DIMS)
        mc = monte_carlo(TrainConfig(epochs=1, batch_size=8), spec, tiny, n_trials=1, lrs=(0.005,),
                         checkpoint_root=tmp_path)
        assert (tmp_path / "lr0.005_seed0" / "index.json").exists()
        assert mc.trials[0].checkpoint.endswith("lr0.005_seed0")


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tiny, tmp_path):
        g = _graph()
        train(g, tiny, TrainConfig(epochs=1, batch_size=8, seed=3))
        save_checkpoint(g, tmp_path / "ck", {"note": "x"})
        return g, tmp_path / "ck"

    def test_round_trip(self, saved, tiny):
        g, path = saved
        back, meta = load_checkpoint(path)
        assert meta == {"note": "x"}
        x, _ = tiny.split("test")
        assert np.array_equal(forward_all(g, x), forward_all(back, x))

    def test_index_lists_sha(self, saved):
        index = json.loads((saved[1] / "index.json").read_text())
        assert all(len(e["sha256"]) == 64 for e in index["tensors"])
        assert {e["kind"] for e in index["tensors"]} == {"param", "buffer"}

    def test_corruption_detected(self, saved):
        f = sorted((saved[1] / "tensors").glob("*.dft1"))[3]
        blob = bytearray(f.read_bytes())
        blob[-3] ^= 0x01
        f.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(saved[1])

    def test_missing_tensor(self, saved):
        idx = saved[1] / "index.json"
        index = json.loads(idx.read_text())
        index["tensors"].pop(0)
        idx.write_text(json.dumps(index))
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(saved[1])

    def test_missing_index(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)
