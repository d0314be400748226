import numpy as np
import pytest

from dlab.distill import (KIND_FULL, KIND_PT, KIND_TOPK, DistillConfig,
                          Method)
from dlab.mathcore import SeededRng
from dlab.mlp import MlpConfig, init_params
from dlab.synthgen import Dataset, SyntheticSpec, gen_dataset
from dlab.trainer import (Adam, Metrics, OptimizerConfig, RunConfig,
                          SgdNesterov, TrainingDiverged, evaluate,
                          make_optimizer, precompute_teacher,
                          read_history_csv, train, write_history_csv)


def small_data(tau=0.0, M=0, n_train=2000, n_valid=500, seed=12, d=20, K=4, C=4):
    spec = SyntheticSpec.create(d=d, K=K, C=C, tau=tau, M=M,
                                n_train=n_train, n_valid=n_valid, seed=seed)
    return gen_dataset(spec)


def run_cfg(method=Method.CE, steps=200, K=4, d=20, hidden=8, **kw):
    loss_kw = kw.pop("loss_kw", {})
    return RunConfig(
        model=MlpConfig(d_in=d, hidden=hidden, K=K, use_batchnorm=True,
                        use_residual=True, normalize_logits=True),
        loss=DistillConfig(method=method, **loss_kw),
        optimizer=OptimizerConfig(kind="adam", lr=1e-3),
        batch_size=64, max_steps=steps, eval_every=100, seed=7, **kw)


class TestOptimizers:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(kind="rmsprop")
        with pytest.raises(ValueError):
            OptimizerConfig(lr=0.0)
        with pytest.raises(ValueError):
            OptimizerConfig(momentum=1.0)

    def test_lr_schedule(self):
        cfg = OptimizerConfig(lr=0.1, lr_schedule=((100, 0.01), (200, 0.001)))
        assert cfg.lr_at(50) == 0.1
        assert cfg.lr_at(100) == 0.01
        assert cfg.lr_at(400) == 0.001

    def test_adam_converges_on_quadratic(self):
        # f(x) = (x - 3)^2, minimizer 3; lr 1e-2, at most 10k steps
        x = np.array([0.0])
        opt = Adam(OptimizerConfig(kind="adam", lr=1e-2), x)
        for _ in range(10_000):
            opt.step(2.0 * (x - 3.0))
            if abs(x[0] - 3.0) < 1e-6:
                break
        assert abs(x[0] - 3.0) < 1e-6

    def test_nesterov_converges_on_quadratic(self):
        x = np.array([5.0])
        opt = SgdNesterov(OptimizerConfig(kind="sgd_nesterov", lr=0.05, momentum=0.9), x)
        for _ in range(2_000):
            opt.step(2.0 * (x - 3.0))
        assert abs(x[0] - 3.0) < 1e-8

    def test_weight_decay_shrinks_params(self):
        x = np.array([10.0])
        opt = SgdNesterov(OptimizerConfig(kind="sgd_nesterov", lr=0.1,
                                          momentum=0.0, weight_decay=1.0), x)
        for _ in range(50):
            opt.step(np.zeros(1))
        assert abs(x[0]) < 10.0

    def test_factory(self):
        flat = np.zeros(3)
        assert isinstance(make_optimizer(OptimizerConfig(kind="adam"), flat), Adam)
        assert isinstance(make_optimizer(OptimizerConfig(kind="sgd_nesterov"), flat),
                          SgdNesterov)


class TestEvaluate:
    def test_constant_predictor_on_single_class_data(self):
        train_ds, _ = small_data(n_train=50, n_valid=0)
        ds = Dataset(train_ds.spec, train_ds.X, np.full(50, 2), "valid")
        params = init_params(MlpConfig(d_in=20, hidden=4, K=4), SeededRng(0))
        params.flat[:] = 0.0
        params.views["bl"][:] = [0.0, 0.0, 1.0, 0.0]  # constant argmax = 2
        assert evaluate(params, ds).valid_top1 == 1.0

    def test_balanced_data_constant_prediction(self):
        spec = SyntheticSpec.create(d=8, K=4, C=4, tau=0.0, M=0,
                                    n_train=0, n_valid=0, seed=1)
        X = np.zeros((400, 8))
        t = np.tile(np.arange(4), 100)
        ds = Dataset(spec, X, t, "valid")
        params = init_params(MlpConfig(d_in=8, hidden=4, K=4), SeededRng(0))
        params.flat[:] = 0.0
        assert evaluate(params, ds).valid_top1 == pytest.approx(0.25)

    def test_empty_dataset_rejected(self):
        _, valid = small_data(n_train=10, n_valid=0)
        params = init_params(MlpConfig(d_in=20, hidden=4, K=4), SeededRng(0))
        with pytest.raises(ValueError):
            evaluate(params, valid)


class TestTrain:
    def test_learns_separable_data(self):
        train_ds, valid_ds = small_data(tau=0.0, M=0)
        res = train(run_cfg(steps=1500), train_ds, valid_ds)
        assert res.best_acc > 0.9

    def test_lambda_zero_kd_identical_to_ce(self):
        train_ds, valid_ds = small_data(n_train=500, n_valid=100)
        teacher = init_params(MlpConfig(d_in=20, hidden=8, K=4), SeededRng(3))
        cache = precompute_teacher(teacher, train_ds, KIND_FULL)
        r_ce = train(run_cfg(Method.CE, steps=120), train_ds, valid_ds)
        r_kd = train(run_cfg(Method.KD, steps=120, loss_kw={"lam": 0.0, "T": 4.0}),
                     train_ds, valid_ds, cache=cache)
        assert [(m.step, m.train_loss, m.valid_top1) for m in r_ce.history] == \
               [(m.step, m.train_loss, m.valid_top1) for m in r_kd.history]
        assert np.array_equal(r_ce.final_params.flat, r_kd.final_params.flat)

    def test_single_step_contract(self):
        train_ds, valid_ds = small_data(n_train=200, n_valid=50)
        cfg = run_cfg(steps=1)
        res = train(cfg, train_ds, valid_ds)
        assert len(res.history) == 1 and res.history[0].step == 1
        init = init_params(cfg.model, SeededRng(cfg.seed))
        assert not np.array_equal(res.final_params.flat, init.flat)

    def test_bit_exact_determinism(self):
        train_ds, valid_ds = small_data(n_train=400, n_valid=100)
        cfg = run_cfg(steps=150)
        r1 = train(cfg, train_ds, valid_ds)
        r2 = train(cfg, train_ds, valid_ds)
        assert np.array_equal(r1.final_params.flat, r2.final_params.flat)
        assert np.array_equal(r1.best_params.flat, r2.best_params.flat)
        assert [m.train_loss for m in r1.history] == [m.train_loss for m in r2.history]

    def test_loss_slope_negative_on_separable_data(self):
        train_ds, valid_ds = small_data(tau=0.0, M=0, n_train=1000, n_valid=50)
        cfg = run_cfg(steps=100, eval_every=1)
        res = train(cfg, train_ds, valid_ds)
        losses = np.array([m.train_loss for m in res.history])
        steps = np.arange(len(losses), dtype=np.float64)
        slope = np.polyfit(steps, losses, 1)[0]
        assert slope < 0

    def test_missing_cache_rejected(self):
        train_ds, valid_ds = small_data(n_train=100, n_valid=20)
        with pytest.raises(ValueError):
            train(run_cfg(Method.KD, loss_kw={"lam": 0.5}), train_ds, valid_ds)

    def test_divergence_aborts(self):
        train_ds, valid_ds = small_data(n_train=200, n_valid=50)
        cfg = run_cfg(steps=3000)
        cfg = RunConfig(model=cfg.model, loss=cfg.loss,
                        optimizer=OptimizerConfig(kind="sgd_nesterov", lr=1e9),
                        batch_size=64, max_steps=3000, eval_every=1000, seed=1)
        with pytest.raises(TrainingDiverged):
            train(cfg, train_ds, valid_ds)

    def test_empty_train_split_rejected(self):
        train_ds, valid_ds = small_data(n_train=0, n_valid=20)
        with pytest.raises(ValueError):
            train(run_cfg(), train_ds, valid_ds)


class TestPrecompute:
    def _teacher(self):
        train_ds, _ = small_data(n_train=64, n_valid=0)
        params = init_params(MlpConfig(d_in=20, hidden=8, K=4), SeededRng(5))
        return params, train_ds

    def test_full_rows_are_distributions(self):
        params, ds = self._teacher()
        cache = precompute_teacher(params, ds, KIND_FULL)
        np.testing.assert_allclose(cache.p.sum(axis=1), 1.0, atol=1e-12)
        assert len(cache) == 64

    def test_pt_matches_full(self):
        params, ds = self._teacher()
        full = precompute_teacher(params, ds, KIND_FULL)
        pt = precompute_teacher(params, ds, KIND_PT)
        np.testing.assert_array_equal(pt.p_t, full.p[np.arange(64), ds.t])

    def test_topk_with_k_equal_K_reproduces_full(self):
        params, ds = self._teacher()
        full = precompute_teacher(params, ds, KIND_FULL)
        topk = precompute_teacher(params, ds, KIND_TOPK, k=4)
        rebuilt = np.zeros_like(full.p)
        np.put_along_axis(rebuilt, topk.topk_idx, topk.topk_p, axis=1)
        np.testing.assert_array_equal(rebuilt, full.p)

    def test_deterministic(self):
        params, ds = self._teacher()
        c1 = precompute_teacher(params, ds, KIND_FULL)
        c2 = precompute_teacher(params, ds, KIND_FULL)
        assert np.array_equal(c1.p, c2.p)

    def test_bad_k_rejected(self):
        params, ds = self._teacher()
        with pytest.raises(ValueError):
            precompute_teacher(params, ds, KIND_TOPK, k=0)


class TestHistoryCsv:
    def test_roundtrip(self, tmp_path):
        hist = [Metrics(step=100, train_loss=1.25, valid_top1=0.5, best_so_far=0.5),
                Metrics(step=200, train_loss=0.75, valid_top1=0.625, best_so_far=0.625)]
        write_history_csv(tmp_path / "h.csv", hist)
        back = read_history_csv(tmp_path / "h.csv")
        assert [(m.step, m.train_loss, m.valid_top1, m.best_so_far) for m in back] == \
               [(m.step, m.train_loss, m.valid_top1, m.best_so_far) for m in hist]

    def test_write_is_deterministic(self, tmp_path):
        hist = [Metrics(step=1, train_loss=1 / 3, valid_top1=2 / 3, best_so_far=2 / 3)]
        write_history_csv(tmp_path / "a.csv", hist)
        write_history_csv(tmp_path / "b.csv", hist)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
