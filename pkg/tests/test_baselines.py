"""Baseline architectures: ablation contracts, gradchecks, harness reports."""

import numpy as np
import pytest

from crossfuse.data import SyntheticSpec, generate_synthetic, make_batch
from crossfuse.gradcheck import (
    DEFAULT_TOLERANCE,
    jitter_parameters,
    model_gradcheck,
)
from crossfuse.losses import BTConfig
from crossfuse.model import ModelConfig, load_checkpoint, save_checkpoint
from crossfuse.baselines import (
    BASELINE_KINDS,
    BaselineConfig,
    REFERENCE_BENCHMARK,
    REFERENCE_TAU_CURVE,
    benchmark_csv,
    build_baseline,
    run_benchmark,
    run_tau_sweep,
    sweep_csv,
)
from crossfuse.training import TrainConfig, train_one
from tests.test_model import toy_batch

TOY_BASE = dict(d_sensor=4, d_image=6, latent_dim=8, num_heads=2,
                num_latents=2, hidden_dim=8)


def toy_baseline(kind, seed=0, dropout=0.4):
    return build_baseline(BaselineConfig(kind=kind, dropout=dropout, **TOY_BASE),
                          seed=seed)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(
        SyntheticSpec(n_samples=150, split_counts=(100, 25, 25), seed=1)
    )


class TestContracts:
    def test_sensor_only_ignores_image(self):
        model = toy_baseline("sensor_only")
        batch = toy_batch(missing_row=False)
        base = model.predict_proba(batch)
        batch.image[:] = np.random.default_rng(0).normal(size=batch.image.shape)
        np.testing.assert_array_equal(model.predict_proba(batch), base)

    def test_image_only_ignores_sensor(self):
        model = toy_baseline("image_only")
        batch = toy_batch(missing_row=False)
        base = model.predict_proba(batch)
        batch.sensor[:] = 42.0
        np.testing.assert_array_equal(model.predict_proba(batch), base)

    def test_concat_input_width_is_sum_of_dims(self):
        model = build_baseline(BaselineConfig(kind="transformer_concat"))
        assert model.params["proj.weight"].shape == (32, 28 + 512)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown baseline kind"):
            BaselineConfig(kind="resnet")

    def test_inapplicable_fields_warn(self, caplog):
        import logging
        with caplog.at_level(logging.WARNING, logger="crossfuse.baselines"):
            BaselineConfig(kind="sensor_only", num_latents=7, latent_dim=48)
        assert any("num_latents" in r.message for r in caplog.records)
        assert any("latent_dim" in r.message for r in caplog.records)

    def test_head_width_uses_hidden_dim(self):
        for kind in BASELINE_KINDS:
            model = toy_baseline(kind)
            assert model.params["head.hidden_weight"].shape[0] == 8

    def test_perceiverio_decoder_reads_all_latents(self):
        model = toy_baseline("perceiverio_classic")
        assert model.params["head.hidden_weight"].shape[1] == 2 * 2 * 8

    def test_eval_forward_deterministic(self):
        for kind in BASELINE_KINDS:
            model = toy_baseline(kind)
            batch = toy_batch()
            np.testing.assert_array_equal(model.predict_proba(batch),
                                          model.predict_proba(batch))

    def test_checkpoint_roundtrip(self, tmp_path):
        for kind in BASELINE_KINDS:
            model = toy_baseline(kind, seed=3)
            path = tmp_path / f"{kind}.json"
            save_checkpoint(model, path)
            loaded = load_checkpoint(path)
            batch = toy_batch()
            np.testing.assert_array_equal(model.predict_proba(batch),
                                          loaded.predict_proba(batch))


class TestGradients:
    @pytest.mark.parametrize("kind", BASELINE_KINDS)
    def test_gradcheck_every_parameter(self, kind):
        model = toy_baseline(kind, seed=1)
        jitter_parameters(model, seed=2)
        errs = model_gradcheck(model, toy_batch(n=3), dropout_seed=3)
        worst = max(errs.values())
        assert worst < DEFAULT_TOLERANCE, \
            f"{kind}: worst {worst:.2e} at {max(errs, key=errs.get)}"


class TestTraining:
    @pytest.mark.parametrize("kind", BASELINE_KINDS)
    def test_trains_without_nonfinite_loss(self, kind, tiny_data):
        cfg = TrainConfig(lr=1e-3, batch_size=16, max_epochs=2, seed=0,
                          augment=None, bt=BTConfig())
        baseline_cfg = BaselineConfig(kind=kind)
        model, record = train_one(baseline_cfg, cfg, tiny_data)
        assert len(record.epochs) == 2
        assert all(np.isfinite(s["total"]) for s in record.steps)
        # CE-only: the regularizer never contributes for single-latent models
        assert all(s["bt"] == 0.0 for s in record.steps)


@pytest.fixture(scope="module")
def report(tiny_data):
    cfg = TrainConfig(lr=2e-3, batch_size=16, max_epochs=2, seed=0,
                      augment=None)
    model_cfg = ModelConfig(d_latent=16, head_hidden=16, dropout=0.1)
    return run_benchmark(tiny_data, cfg, kinds=["sensor_only", "image_only"],
                         model_cfg=model_cfg, n_seeds=2, jobs=1)


class TestBenchmark:

    def test_one_row_per_kind_plus_fusion(self, report):
        assert set(report["models"]) == {"fusion", "sensor_only", "image_only"}
        assert report["n_seeds"] == 2

    def test_rows_carry_reference_annotations(self, report):
        assert report["models"]["fusion"]["reference"] == \
            REFERENCE_BENCHMARK["fusion"]
        assert report["models"]["sensor_only"]["reference"]["accuracy"] == 0.615

    def test_ranking_sorted_by_ensemble_accuracy(self, report):
        accs = [report["models"][k]["ensemble"]["accuracy"]
                for k in report["ranking"]]
        assert accs == sorted(accs, reverse=True)

    def test_deterministic_rerun(self, tiny_data, report):
        cfg = TrainConfig(lr=2e-3, batch_size=16, max_epochs=2, seed=0,
                          augment=None)
        model_cfg = ModelConfig(d_latent=16, head_hidden=16, dropout=0.1)
        again = run_benchmark(tiny_data, cfg, kinds=["sensor_only", "image_only"],
                              model_cfg=model_cfg, n_seeds=2, jobs=2)
        assert again == report

    def test_csv_has_one_line_per_model(self, report):
        lines = benchmark_csv(report).strip().split("\n")
        assert len(lines) == 1 + 3
        assert lines[0].startswith("kind,ensemble_accuracy")

    def test_unknown_kind_rejected(self, tiny_data):
        with pytest.raises(ValueError, match="unknown baseline kinds"):
            run_benchmark(tiny_data, TrainConfig(augment=None), kinds=["vgg"])


class TestTauSweep:
    def test_single_point_sweep(self, tiny_data):
        cfg = TrainConfig(lr=2e-3, batch_size=16, max_epochs=1, seed=0,
                          augment=None)
        model_cfg = ModelConfig(d_latent=16, head_hidden=16, dropout=0.1)
        report = run_tau_sweep(tiny_data, cfg, taus=[0.3], model_cfg=model_cfg,
                               n_seeds=2)
        assert len(report["points"]) == 1
        assert report["total_runs"] == 2
        assert report["points"][0]["tau"] == 0.3
        assert report["points"][0]["reference_accuracy"] == \
            REFERENCE_TAU_CURVE[0.3]
        csv_lines = sweep_csv(report).strip().split("\n")
        assert len(csv_lines) == 2

    def test_empty_tau_list_rejected(self, tiny_data):
        with pytest.raises(ValueError, match="at least one"):
            run_tau_sweep(tiny_data, TrainConfig(augment=None), taus=[])
