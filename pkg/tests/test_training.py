"""Optimizer anchors, loop invariants, determinism, and the ensemble runner."""

import numpy as np
import pytest

from crossfuse import tensor as T
from crossfuse.data import SyntheticSpec, generate_synthetic
from crossfuse.losses import BTConfig
from crossfuse.model import ModelConfig
from crossfuse.training import (
    AdamW,
    EnsembleRunError,
    NonFiniteGradientError,
    TrainConfig,
    evaluate_split,
    train_ensemble,
    train_one,
)


def small_model_cfg(d_s=28, d_i=512):
    return ModelConfig(d_sensor=d_s, d_image=d_i, d_latent=16, num_heads=2,
                       dropout=0.1, head_hidden=16)


def small_train_cfg(**kw):
    defaults = dict(lr=5e-3, weight_decay=0.01, batch_size=16, max_epochs=6,
                    seed=0, augment=None, bt=BTConfig())
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def synth_data():
    return generate_synthetic(
        SyntheticSpec(n_samples=300, split_counts=(200, 50, 50), seed=0)
    )


class TestAdamW:
    def _param(self, value, name="layer.some_weight"):
        p = T.Tensor(np.array([[value]]), requires_grad=True)
        return {name: p}, p

    def test_zero_grad_no_decay_leaves_param(self):
        params, p = self._param(1.5)
        opt = AdamW(params, weight_decay=0.0)
        p.grad = np.zeros((1, 1))
        opt.step(lr=0.1)
        assert p.data[0, 0] == 1.5

    def test_pure_decoupled_decay(self):
        params, p = self._param(1.0)
        opt = AdamW(params, weight_decay=0.05)
        p.grad = np.zeros((1, 1))
        opt.step(lr=0.1)
        assert p.data[0, 0] == pytest.approx(0.995, abs=1e-15)

    def test_first_step_magnitude_is_lr(self):
        params, p = self._param(0.0)
        opt = AdamW(params, weight_decay=0.0)
        p.grad = np.ones((1, 1))
        opt.step(lr=1e-3)
        assert p.data[0, 0] == pytest.approx(-1e-3, rel=1e-6)

    def test_bias_and_gain_exempt_from_decay(self):
        params = {
            "enc.sensor_bias": T.Tensor([[2.0]], requires_grad=True),
            "enc.sensor_ln_gain": T.Tensor([[2.0]], requires_grad=True),
            "enc.sensor_weight": T.Tensor([[2.0]], requires_grad=True),
        }
        opt = AdamW(params, weight_decay=0.5)
        for p in params.values():
            p.grad = np.zeros((1, 1))
        opt.step(lr=0.1)
        assert params["enc.sensor_bias"].data[0, 0] == 2.0
        assert params["enc.sensor_ln_gain"].data[0, 0] == 2.0
        assert params["enc.sensor_weight"].data[0, 0] == pytest.approx(2.0 * 0.95)

    def test_non_finite_gradient_names_parameter(self):
        params, p = self._param(0.0, name="fusion.query_weight")
        opt = AdamW(params)
        p.grad = np.array([[np.nan]])
        with pytest.raises(NonFiniteGradientError, match="fusion.query_weight"):
            opt.step(lr=1e-3)

    def test_none_grad_treated_as_zero(self):
        params, p = self._param(3.0)
        opt = AdamW(params, weight_decay=0.0)
        opt.step(lr=0.1)
        assert p.data[0, 0] == 3.0

    def test_matches_reference_sequence(self):
        # a few steps against a transcribed scalar AdamW recurrence
        params, p = self._param(1.0)
        opt = AdamW(params, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8)
        m = v = 0.0
        ref = 1.0
        for t in range(1, 6):
            g = 0.5 * ref  # pretend loss 0.25*p^2
            p.grad = np.array([[g]])
            opt.step(lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref *= 1 - 0.01 * 0.01
            ref -= 0.01 * (m / (1 - 0.9 ** t)) / (
                np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert p.data[0, 0] == pytest.approx(ref, rel=1e-12)


class TestTrainOne:
    def test_zero_epochs_returns_init(self, synth_data):
        cfg = small_train_cfg(max_epochs=0)
        model, record = train_one(small_model_cfg(), cfg, synth_data)
        fresh = small_model_cfg().build(cfg.seed)
        for name, t in model.parameters().items():
            np.testing.assert_array_equal(t.data, fresh.parameters()[name].data)
        assert record.epochs == [] and record.steps == []
        assert record.best_epoch is None and record.stopped_epoch is None

    def test_deterministic_rerun(self, synth_data):
        cfg = small_train_cfg(max_epochs=3, seed=5)
        m1, r1 = train_one(small_model_cfg(), cfg, synth_data)
        m2, r2 = train_one(small_model_cfg(), cfg, synth_data)
        assert r1.to_dict() == r2.to_dict()
        for name, t in m1.parameters().items():
            np.testing.assert_array_equal(t.data, m2.parameters()[name].data)

    def test_learning_rate_never_increases(self, synth_data):
        cfg = small_train_cfg(max_epochs=12, plateau_patience=1, seed=1)
        _, record = train_one(small_model_cfg(), cfg, synth_data)
        lrs = [e["lr"] for e in record.epochs]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        for lr in lrs:
            k = round(np.log(lr / cfg.lr) / np.log(cfg.plateau_factor))
            assert lr == pytest.approx(cfg.lr * cfg.plateau_factor ** k, rel=1e-12)

    def test_early_stopping_bound(self, synth_data):
        cfg = small_train_cfg(max_epochs=30, early_stop_patience=2, seed=2)
        _, record = train_one(small_model_cfg(), cfg, synth_data)
        assert record.stopped_epoch - record.best_epoch <= cfg.early_stop_patience
        assert record.best_val_accuracy == max(e["val_accuracy"]
                                               for e in record.epochs)

    def test_best_params_reproduce_recorded_val_accuracy(self, synth_data):
        cfg = small_train_cfg(max_epochs=6, seed=3)
        model, record = train_one(small_model_cfg(), cfg, synth_data)
        accuracy, _ = evaluate_split(model, synth_data.val)
        assert accuracy == pytest.approx(record.best_val_accuracy, abs=1e-12)

    def test_loss_decomposition_identity_every_step(self, synth_data):
        for lambda0 in (0.01, 0.0):
            cfg = small_train_cfg(max_epochs=2, bt=BTConfig(lambda0=lambda0))
            _, record = train_one(small_model_cfg(), cfg, synth_data)
            assert record.steps
            for s in record.steps:
                assert s["total"] - s["ce"] == pytest.approx(
                    s["lambda"] * s["bt"] if lambda0 else 0.0, abs=1e-12
                )

    def test_fits_separable_synthetic_data(self):
        # oracle first: a linear probe must find this task easy
        from sklearn.linear_model import LogisticRegression
        data = generate_synthetic(SyntheticSpec(
            n_samples=700, split_counts=(500, 100, 100),
            redundancy=0.4, complementarity=0.5, noise=0.02, seed=4,
        ))
        x = np.stack([np.concatenate([s.sensor, s.image]) for s in data.train])
        y = np.array([s.label for s in data.train])
        oracle = LogisticRegression(max_iter=2000).fit(x, y)
        assert oracle.score(x, y) >= 0.95
        cfg = small_train_cfg(max_epochs=20, seed=0, lr=5e-3)
        model, _ = train_one(small_model_cfg(), cfg, data)
        train_accuracy, _ = evaluate_split(model, data.train)
        assert train_accuracy >= 0.95


class TestEnsemble:
    def test_singleton_matches_train_one(self, synth_data):
        cfg = small_train_cfg(max_epochs=2, seed=9)
        [(m_ens, r_ens)] = train_ensemble(small_model_cfg(), cfg, synth_data,
                                          n_seeds=1)
        m_one, r_one = train_one(small_model_cfg(), cfg, synth_data)
        assert r_ens.to_dict() == r_one.to_dict()
        for name, t in m_ens.parameters().items():
            np.testing.assert_array_equal(t.data, m_one.parameters()[name].data)

    def test_results_independent_of_parallelism(self, synth_data):
        cfg = small_train_cfg(max_epochs=2, seed=0)
        serial = train_ensemble(small_model_cfg(), cfg, synth_data, n_seeds=3, jobs=1)
        threaded = train_ensemble(small_model_cfg(), cfg, synth_data, n_seeds=3, jobs=3)
        for (m1, r1), (m2, r2) in zip(serial, threaded):
            assert r1.to_dict() == r2.to_dict()
            for name, t in m1.parameters().items():
                np.testing.assert_array_equal(t.data, m2.parameters()[name].data)

    def test_seeds_are_contiguous_and_ordered(self, synth_data):
        cfg = small_train_cfg(max_epochs=1, seed=4)
        results = train_ensemble(small_model_cfg(), cfg, synth_data, n_seeds=3)
        assert [r.seed for _, r in results] == [4, 5, 6]

    def test_failed_run_names_seed(self, synth_data):
        class Exploding:
            def build(self, seed):
                if seed == 6:
                    raise RuntimeError("boom")
                return small_model_cfg().build(seed)

        cfg = small_train_cfg(max_epochs=1, seed=5)
        with pytest.raises(EnsembleRunError, match="seed 6"):
            train_ensemble(Exploding(), cfg, synth_data, n_seeds=3)
