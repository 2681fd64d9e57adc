"""
Tests for the two-phase training pipeline and its run-directory artifacts.
"""

import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from confidence_iqn import tensor_core as tc
from confidence_iqn.checkpoint import load_metadata
from confidence_iqn.data_io import Split
from confidence_iqn.errors import (
    ContractError,
    DivergenceError,
    FormatError,
    MissingArtifactError,
    ParameterError,
    TruncatedFileError,
)
from confidence_iqn.losses import QuantileLossConfig, cross_entropy
from confidence_iqn.optim import AdadeltaConfig
from confidence_iqn.tensor_core import Rng
from confidence_iqn.training import (
    CLASSIFIER_CKPT,
    IQN_CKPT,
    METRICS_FILE,
    RUN_FILE,
    SCALAR_CKPT,
    TARGETS_FILE,
    TrainConfig,
    compute_target_losses,
    load_trained,
    phase_seed,
    predict_log_probs,
    read_targets,
    run_pipeline,
    sample_taus,
    train_classifier,
    train_iqn,
    train_scalar,
    write_targets,
)
from confidence_iqn.uncertainty import estimate_distribution, estimate_scalar


@pytest.fixture
def cfg():
    return TrainConfig(seed=3, epochs=2, batch_size=8, n_taus=4)


@pytest.fixture
def trained(tiny_train, cfg):
    classifier, _ = train_classifier(tiny_train, cfg)
    return classifier


def _same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


class TestTrainConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ParameterError, match="epochs"):
            TrainConfig(seed=1, epochs=0)

    def test_bad_batch_size(self):
        with pytest.raises(ParameterError):
            TrainConfig(seed=1, batch_size=0)

    def test_phase2_epochs_default_to_epochs(self):
        assert TrainConfig(seed=1, epochs=5).phase2_epochs == 5
        assert TrainConfig(seed=1, epochs=5, estimator_epochs=2).phase2_epochs == 2

    def test_loss_taus_follow_n_taus(self):
        cfg = TrainConfig(seed=1, n_taus=16, loss=QuantileLossConfig(kappa=2.0))
        assert cfg.loss.n_taus == 16
        assert cfg.loss.kappa == 2.0

    def test_snapshot_is_json_ready(self):
        snapshot = TrainConfig(seed=1).snapshot()
        assert snapshot["dataset"] == "mnist"
        assert snapshot["loss"]["mode"] == "huber"
        assert snapshot["optimizer"]["rho"] == 0.9
        json.dumps(snapshot)


class TestTargetsFile:
    def test_layout(self, tmp_path):
        path = write_targets(tmp_path / "targets.bin", np.array([0.5, 2.0]))
        payload = path.read_bytes()
        assert payload[:4] == b"\x02\x00\x00\x00"
        assert len(payload) == 12
        assert read_targets(path).tolist() == [0.5, 2.0]

    def test_truncated(self, tmp_path):
        path = write_targets(tmp_path / "targets.bin", np.arange(3.0))
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(TruncatedFileError, match="header says 3 losses"):
            read_targets(path)

    def test_trailing_bytes(self, tmp_path):
        path = write_targets(tmp_path / "targets.bin", np.arange(3.0))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_targets(path)

    def test_missing(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="confidence-iqn train"):
            read_targets(tmp_path / "targets.bin")


class TestComputeTargetLosses:
    def test_one_nonnegative_loss_per_example(self, trained, tiny_train):
        table = compute_target_losses(trained, tiny_train)
        assert table.shape == (len(tiny_train),)
        assert np.all(table >= 0.0)

    def test_mean_matches_eval_loss(self, trained, tiny_train):
        table = compute_target_losses(trained, tiny_train, batch_size=5)
        log_probs = predict_log_probs(trained, tiny_train.images.data)
        _, mean = cross_entropy(tc.constant(log_probs), tiny_train.labels)
        assert float(table.mean()) == pytest.approx(mean.item(), abs=1e-6)

    def test_cached_file_matches(self, trained, tiny_train, tmp_path):
        table = compute_target_losses(trained, tiny_train, tmp_path / TARGETS_FILE)
        assert np.array_equal(read_targets(tmp_path / TARGETS_FILE), table)


class TestTrainClassifier:
    def test_metrics_per_epoch(self, tiny_train, cfg):
        _, record = train_classifier(tiny_train, cfg)
        rows = record.phase_metrics("classifier")
        assert [row["epoch"] for row in rows] == [1, 2]
        assert [row["lr"] for row in rows] == pytest.approx([1.0, 0.7])
        assert all(np.isfinite(row["loss"]) and 0.0 <= row["accuracy"] <= 1.0 for row in rows)

    def test_seeded_rerun_is_bit_identical(self, tiny_train, cfg):
        a, record_a = train_classifier(tiny_train, cfg)
        b, record_b = train_classifier(tiny_train, cfg)
        assert _same_state(a, b)
        assert record_a.metrics == record_b.metrics

    def test_different_seed_differs(self, tiny_train, cfg):
        a, _ = train_classifier(tiny_train, cfg)
        b, _ = train_classifier(tiny_train, replace(cfg, seed=4))
        assert not _same_state(a, b)

    def test_checkpoint_metadata(self, tiny_train, cfg, tmp_path):
        train_classifier(tiny_train, cfg, tmp_path)
        meta = load_metadata(tmp_path / CLASSIFIER_CKPT)
        assert meta["kind"] == "classifier"
        assert meta["epochs_completed"] == 2
        assert meta["seed"] == 3
        assert len(meta["history"]) == 2
        assert meta["optimizer_state"]["steps"] == 2 * (len(tiny_train) // cfg.batch_size)
        assert meta["optimizer_state"]["rho"] == 0.9

    def test_rejects_test_split(self, tiny_test, cfg):
        with pytest.raises(ContractError, match="train split"):
            train_classifier(tiny_test, cfg)

    def test_divergence_names_phase_and_batch(self, tiny_train, cfg):
        exploding = replace(cfg, optimizer=AdadeltaConfig(lr=1e30))
        with pytest.raises(DivergenceError, match=r"classifier loss became .* at epoch 1, batch"):
            train_classifier(tiny_train, exploding)

    def test_resume_matches_uninterrupted_run(self, tiny_train, cfg, tmp_path):
        full, full_record = train_classifier(tiny_train, cfg, tmp_path / "full")

        train_classifier(tiny_train, replace(cfg, epochs=1), tmp_path / "split")
        resumed, resumed_record = train_classifier(tiny_train, replace(cfg, resume=True), tmp_path / "split")

        assert _same_state(full, resumed)
        assert resumed_record.metrics == full_record.metrics

    def test_float64_precision(self, tiny_train, cfg):
        model, _ = train_classifier(tiny_train, replace(cfg, epochs=1, precision="float64"))
        assert model.fc2.weight.dtype == np.float64
        assert tc.default_dtype() is np.float32


class TestTrainEstimators:
    def test_iqn_trains_and_logs(self, trained, tiny_train, cfg):
        model, record = train_iqn(trained, tiny_train, cfg)
        rows = record.phase_metrics("iqn")
        assert len(rows) == 2
        assert all(np.isfinite(row["loss"]) and np.isnan(row["accuracy"]) for row in rows)

    def test_frozen_backbone_is_untouched(self, trained, tiny_train, cfg):
        model, _ = train_iqn(trained, tiny_train, replace(cfg, freeze_backbone=True))
        assert _same_state(model.backbone, trained.backbone)

    def test_unfrozen_backbone_moves(self, trained, tiny_train, cfg):
        model, _ = train_iqn(trained, tiny_train, cfg)
        assert not _same_state(model.backbone, trained.backbone)

    def test_classifier_not_mutated(self, trained, tiny_train, cfg):
        before = trained.state_dict()
        train_iqn(trained, tiny_train, cfg)
        train_scalar(trained, tiny_train, cfg)
        after = trained.state_dict()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_scalar_is_deterministic(self, trained, tiny_train, cfg):
        a, _ = train_scalar(trained, tiny_train, cfg)
        b, _ = train_scalar(trained, tiny_train, cfg)
        assert _same_state(a, b)

    def test_target_count_checked(self, trained, tiny_train, cfg):
        with pytest.raises(ContractError, match="target losses"):
            train_scalar(trained, tiny_train, cfg, targets=np.zeros(3, dtype=np.float32))

    def test_rejects_test_split(self, trained, tiny_test, cfg):
        with pytest.raises(ContractError):
            train_iqn(trained, tiny_test, cfg)


@pytest.mark.slow
class TestConstantTargetConvergence:
    TARGET = 0.5

    @pytest.fixture
    def long_cfg(self, cfg):
        return replace(
            cfg,
            epochs=30,
            dropout_enabled=False,
            freeze_backbone=True,
            n_taus=16,
            optimizer=AdadeltaConfig(gamma=0.9),
        )

    @pytest.fixture
    def constant_targets(self, tiny_train, tmp_path):
        path = write_targets(tmp_path / TARGETS_FILE, np.full(len(tiny_train), self.TARGET, dtype=np.float32))
        return read_targets(path)

    def test_scalar_learns_the_constant(self, trained, tiny_train, long_cfg, constant_targets):
        model, _ = train_scalar(trained, tiny_train, long_cfg, targets=constant_targets)
        for i in range(4):
            assert estimate_scalar(model, tiny_train.images.data[i]) == pytest.approx(self.TARGET, abs=1e-2)

    def test_iqn_mean_learns_the_constant(self, trained, tiny_train, long_cfg, constant_targets):
        model, _ = train_iqn(trained, tiny_train, long_cfg, targets=constant_targets)
        for i in range(4):
            estimate = estimate_distribution(model, tiny_train.images.data[i], 64, seed=0, example_id=i)
            assert estimate.mean == pytest.approx(self.TARGET, abs=0.05)


class TestTauSampling:
    def test_shape_and_range(self):
        taus = sample_taus(Rng(0), 8, 16)
        assert taus.shape == (8, 16)
        assert taus.min() >= 0.0 and taus.max() < 1.0

    def test_epoch_of_taus_is_uniform(self):
        rng = Rng(phase_seed(3, "iqn")).child("epoch", 0)
        taus = np.concatenate([
            sample_taus(rng.child("batch", step).child("taus"), 64, 64).ravel() for step in range(16)
        ])
        assert stats.kstest(taus, "uniform").pvalue > 0.01

    def test_fresh_draws_per_batch(self):
        rng = Rng(1).child("epoch", 0)
        a = sample_taus(rng.child("batch", 0).child("taus"), 4, 4)
        b = sample_taus(rng.child("batch", 1).child("taus"), 4, 4)
        assert not np.array_equal(a, b)

    def test_phase_seeds(self):
        assert phase_seed(7, "iqn") == phase_seed(7, "iqn")
        assert phase_seed(7, "iqn") != phase_seed(7, "scalar")


class TestRunPipeline:
    def test_writes_run_directory(self, tiny_train, cfg, tmp_path):
        run_dir = tmp_path / "run"
        record = run_pipeline(tiny_train, cfg, run_dir, extra_metadata={"subset": None})

        for name in (CLASSIFIER_CKPT, IQN_CKPT, SCALAR_CKPT, TARGETS_FILE, METRICS_FILE, RUN_FILE):
            assert (run_dir / name).exists()
        metrics = pd.read_csv(run_dir / METRICS_FILE)
        assert list(metrics.columns) == ["phase", "epoch", "loss", "accuracy", "lr"]
        assert metrics["phase"].tolist() == ["classifier"] * 2 + ["iqn"] * 2 + ["scalar"] * 2
        run = json.loads((run_dir / RUN_FILE).read_text())
        assert run["config"]["seed"] == 3
        assert "subset" in run
        assert set(run["wall_clock_seconds"]) == {"classifier", "iqn", "scalar"}
        assert len(read_targets(run_dir / TARGETS_FILE)) == len(tiny_train)
        assert record.code_version

    def test_single_variant(self, tiny_train, cfg, tmp_path):
        run_pipeline(tiny_train, cfg, tmp_path, variants=("iqn",))
        assert (tmp_path / IQN_CKPT).exists()
        assert not (tmp_path / SCALAR_CKPT).exists()

    def test_rerun_metrics_bit_identical(self, tiny_train, cfg, tmp_path):
        run_pipeline(tiny_train, cfg, tmp_path / "a", variants=("iqn",))
        run_pipeline(tiny_train, cfg, tmp_path / "b", variants=("iqn",))
        assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()
        assert (tmp_path / "a" / IQN_CKPT).read_bytes() == (tmp_path / "b" / IQN_CKPT).read_bytes()

    def test_load_trained_round_trip(self, tiny_train, cfg, tmp_path):
        run_pipeline(tiny_train, cfg, tmp_path, variants=("scalar",))
        scalar = load_trained(tmp_path, "scalar")
        images = tc.constant(tiny_train.images.data[:3])
        assert scalar(images, training=False).shape == (3, 1)

    def test_missing_phase_two_checkpoint(self, tiny_train, cfg, tmp_path):
        run_pipeline(tiny_train, cfg, tmp_path, variants=("scalar",))
        with pytest.raises(MissingArtifactError, match="--variant iqn"):
            load_trained(tmp_path, "iqn")

    def test_split_is_checked(self, tiny_test, cfg, tmp_path):
        assert tiny_test.split is Split.TEST
        with pytest.raises(ContractError):
            run_pipeline(tiny_test, cfg, tmp_path)
