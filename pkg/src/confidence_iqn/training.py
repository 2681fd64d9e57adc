"""
Training Pipeline

Two phases over the training split:

    1. train the classifier with cross-entropy
    2. cache its eval-mode per-example losses, transfer the backbone into the
       IQN (and/or scalar) estimator and regress those losses

Every phase uses Adadelta with a per-epoch StepLR decay. The shuffle order,
dropout masks and tau samples of epoch e all come from streams derived from
(seed, phase, e), so a phase can be resumed from any epoch checkpoint and
reproduce the uninterrupted run bit for bit.
"""

import json
import logging
import struct
import subprocess
import time
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import __version__
from . import tensor_core as tc
from .checkpoint import load_checkpoint, load_metadata, save_checkpoint
from .data_io import Batch, BatchIterator, DatasetKind, LabeledDataset, Split
from .errors import (
    ContractError,
    DivergenceError,
    FormatError,
    MissingArtifactError,
    ParameterError,
    TruncatedFileError,
)
from .losses import DEFAULT_QUANTILE_LOSS, QuantileLossConfig, cross_entropy, mse, quantile_loss
from .models import (
    ClassifierModel,
    IqnModel,
    Module,
    ScalarModel,
    build_from_metadata,
    classifier_forward,
    describe,
    iqn_forward,
    transfer_weights,
)
from .optim import DEFAULT_ADADELTA, Adadelta, AdadeltaConfig, AdadeltaState, StepLrSchedule, schedule_epoch_end
from .tensor_core import Rng, Tensor

logger = logging.getLogger(__name__)

CLASSIFIER_CKPT = "classifier.ckpt"
IQN_CKPT = "iqn.ckpt"
SCALAR_CKPT = "scalar.ckpt"
TARGETS_FILE = "targets.bin"
METRICS_FILE = "metrics.csv"
RUN_FILE = "run.json"

OPTIM_PREFIX = "optim"
OPTIM_STATE_KEY = "optimizer_state"


# ── Configuration ────────────────────────────────────────────────────


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    dataset: DatasetKind = DatasetKind.MNIST
    epochs: int = 20
    estimator_epochs: int | None = None
    batch_size: int = 64
    dropout_enabled: bool = True
    n_taus: int = 64
    precision: str = "float32"
    freeze_backbone: bool = False
    optimizer: AdadeltaConfig = DEFAULT_ADADELTA
    loss: QuantileLossConfig = DEFAULT_QUANTILE_LOSS
    progress: bool = False
    resume: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.estimator_epochs is not None and self.estimator_epochs < 1:
            raise ParameterError(f"estimator_epochs must be >= 1, got {self.estimator_epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("float32", "float64"):
            raise ParameterError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.loss.n_taus != self.n_taus:
            object.__setattr__(self, "loss", replace(self.loss, n_taus=self.n_taus))

    @property
    def phase2_epochs(self) -> int:
        return self.estimator_epochs or self.epochs

    def snapshot(self) -> dict[str, Any]:
        out = asdict(self)
        out["dataset"] = self.dataset.value
        out["loss"]["mode"] = self.loss.mode.value
        return out


# 2 + 2 epochs on a 10k-example training subset
DESK_SCALE = TrainConfig(seed=7, epochs=2, estimator_epochs=2)
DESK_SCALE_SUBSET = 10_000


@dataclass
class RunRecord:
    config: dict[str, Any] = field(default_factory=dict)
    metrics: list[dict[str, Any]] = field(default_factory=list)
    wall_clock: dict[str, float] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    code_version: str = ""

    def metrics_frame(self) -> pd.DataFrame:
        columns = ["phase", "epoch", "loss", "accuracy", "lr"]
        return pd.DataFrame(self.metrics, columns=columns)

    def phase_metrics(self, phase: str) -> list[dict[str, Any]]:
        return [row for row in self.metrics if row["phase"] == phase]

    def write(self, run_dir: str | Path, extra: dict[str, Any] | None = None) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_frame().to_csv(run_dir / METRICS_FILE, index=False, float_format="%.9g")
        payload = {
            "config": self.config,
            "code_version": self.code_version,
            "wall_clock_seconds": self.wall_clock,
            "checkpoints": self.checkpoints,
            **(extra or {}),
        }
        (run_dir / RUN_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def code_version() -> str:
    """`git describe` of the working tree, or the package version outside a checkout."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    return result.stdout.strip() if result.returncode == 0 and result.stdout.strip() else __version__


def phase_seed(seed: int, phase: str) -> int:
    """Seed of the streams owned by one training phase."""
    return int(Rng(seed).child("phase", phase).integers(0, 2**63 - 1))


def sample_taus(rng: Rng, batch: int, n_taus: int) -> np.ndarray:
    """iid U([0, 1]) quantile levels, one row per example."""
    return rng.uniform(0.0, 1.0, (batch, n_taus)).astype(tc.default_dtype())


def _as_input(images: np.ndarray) -> Tensor:
    return tc.constant(images.astype(tc.default_dtype(), copy=False))


# ── Checkpoints ──────────────────────────────────────────────────────


def save_model(
    path: str | Path,
    model: Module,
    *,
    optimizer: Adadelta | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Parameters (plus optimizer accumulators when given) and a metadata sidecar."""
    tensors, meta = model.state_dict(), describe(model)
    if optimizer is not None:
        tensors.update(optimizer.state.to_tensors(OPTIM_PREFIX))
        meta[OPTIM_STATE_KEY] = optimizer.state.hyperparameters()
    return save_checkpoint(path, tensors, {**meta, **(extra or {})})


def load_model(path: str | Path, hint: str) -> Module:
    """Rebuild a trained model from its checkpoint and metadata."""
    tensors = load_checkpoint(path, hint=hint)
    model = build_from_metadata(load_metadata(path))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(f"{OPTIM_PREFIX}.")})
    return model


def load_trained(run_dir: str | Path, name: str) -> Module:
    hints = {
        "classifier": "run `confidence-iqn train` to produce the classifier (phase 1)",
        "iqn": "run `confidence-iqn train --variant iqn` (phase 2) for this run",
        "scalar": "run `confidence-iqn train --variant scalar` (phase 2) for this run",
    }
    return load_model(Path(run_dir) / f"{name}.ckpt", hints[name])


# ── Target-loss cache ────────────────────────────────────────────────


def write_targets(path: str | Path, table: np.ndarray) -> Path:
    """u32 count, then little-endian f32 losses by example index."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.ascontiguousarray(table, dtype="<f4")
    path.write_bytes(struct.pack("<I", table.size) + table.tobytes())
    return path


def read_targets(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "run `confidence-iqn train` to cache the classifier's target losses")
    payload = path.read_bytes()
    if len(payload) < 4:
        raise TruncatedFileError(f"{path}: missing count header", offset=len(payload))
    (count,) = struct.unpack_from("<I", payload)
    expected = 4 + 4 * count
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: header says {count} losses, file has {len(payload)} bytes", offset=len(payload))
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes", offset=expected)
    return np.frombuffer(payload, dtype="<f4", offset=4).astype(np.float32)


def predict_log_probs(classifier: ClassifierModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode log-probabilities for every image, batched."""
    chunks = []
    with tc.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = _as_input(images[start : start + batch_size])
            chunks.append(classifier_forward(classifier, chunk, training=False).data)
    if not chunks:
        return np.zeros((0, classifier.num_classes), dtype=tc.default_dtype())
    return np.concatenate(chunks)


def compute_target_losses(
    classifier: ClassifierModel,
    dataset: LabeledDataset,
    path: str | Path | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Eval-mode cross-entropy of every example, optionally cached to `path`."""
    log_probs = predict_log_probs(classifier, dataset.images.data, batch_size)
    per_example, _ = cross_entropy(tc.constant(log_probs), dataset.labels)
    table = per_example.data.astype(np.float32)
    if path is not None:
        write_targets(path, table)
        logger.info("cached %d target losses in %s", table.size, path)
    return table


# ── Shared epoch loop ────────────────────────────────────────────────

# (model, batch, epoch rng) -> (loss, correct predictions or None)
BatchLoss = Callable[[Module, Batch, Rng], tuple[Tensor, int | None]]


def _restore(
    path: Path, phase: str, model: Module, optimizer: Adadelta, schedule: StepLrSchedule, record: RunRecord
) -> int:
    """Load a partial run of `phase`; returns the number of completed epochs."""
    if not path.exists():
        return 0
    meta = load_metadata(path)
    if meta.get("phase") != phase:
        return 0
    tensors = load_checkpoint(path)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(f"{OPTIM_PREFIX}.")})
    optimizer.state = AdadeltaState.from_tensors(tensors, meta.get(OPTIM_STATE_KEY), OPTIM_PREFIX)
    schedule.epochs_elapsed = int(meta["epochs_completed"])
    record.metrics = [row for row in record.metrics if row["phase"] != phase] + list(meta.get("history", []))
    logger.info("resuming %s from epoch %d", phase, schedule.epochs_elapsed)
    return schedule.epochs_elapsed


def _fit(
    phase: str,
    model: Module,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    epochs: int,
    batch_loss: BatchLoss,
    record: RunRecord,
    checkpoint_path: Path | None,
) -> None:
    optimizer = Adadelta(model.named_parameters(), cfg.optimizer)
    schedule = StepLrSchedule.from_config(cfg.optimizer)
    seed = phase_seed(cfg.seed, phase)
    batches = BatchIterator(dataset, cfg.batch_size, seed)

    start = 0
    if cfg.resume and checkpoint_path is not None:
        start = _restore(checkpoint_path, phase, model, optimizer, schedule, record)
    optimizer.set_lr(schedule.current_lr)

    for epoch in range(start, epochs):
        rng = Rng(seed).child("epoch", epoch)
        total_loss, seen, correct = 0.0, 0, 0
        lr = schedule.current_lr
        progress = tqdm(
            batches.epoch(epoch),
            total=len(batches),
            desc=f"{phase} {epoch + 1}/{epochs}",
            disable=not cfg.progress,
            leave=False,
        )
        for step, batch in enumerate(progress):
            loss, batch_correct = batch_loss(model, batch, rng.child("batch", step))
            value = loss.item()
            if not np.isfinite(value):
                logger.error("%s diverged at epoch %d batch %d", phase, epoch + 1, step)
                raise DivergenceError(f"{phase} loss became {value} at epoch {epoch + 1}, batch {step}")
            optimizer.zero_grad()
            tc.backward(loss)
            optimizer.step()
            total_loss += value * len(batch.indices)
            seen += len(batch.indices)
            if batch_correct is not None:
                correct += batch_correct

        optimizer.set_lr(schedule_epoch_end(schedule))
        row = {
            "phase": phase,
            "epoch": epoch + 1,
            "loss": total_loss / max(seen, 1),
            "accuracy": correct / seen if phase == "classifier" and seen else float("nan"),
            "lr": lr,
        }
        record.metrics.append(row)
        logger.info(
            "%s epoch %d/%d loss=%.6f", phase, epoch + 1, epochs, row["loss"],
            extra={"fields": {"phase": phase, "epoch": epoch + 1, "loss": row["loss"], "lr": lr}},
        )
        if checkpoint_path is not None:
            save_model(
                checkpoint_path,
                model,
                optimizer=optimizer,
                extra={
                    "phase": phase,
                    "epochs_completed": epoch + 1,
                    "seed": cfg.seed,
                    "history": record.phase_metrics(phase),
                },
            )
            record.checkpoints[phase] = str(checkpoint_path)


def _require_train_split(dataset: LabeledDataset) -> None:
    if dataset.split is not Split.TRAIN:
        raise ContractError(f"training needs the train split, got {dataset.split.value} ({dataset.source})")


# ── Phases ───────────────────────────────────────────────────────────


def train_classifier(
    dataset: LabeledDataset,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    record: RunRecord | None = None,
) -> tuple[ClassifierModel, RunRecord]:
    _require_train_split(dataset)
    record = record or RunRecord(config=cfg.snapshot())
    with tc.precision(cfg.precision):
        model = ClassifierModel(
            dataset.image_shape,
            dataset.num_classes,
            Rng(cfg.seed).child("init", "classifier"),
            dropout_enabled=cfg.dropout_enabled,
        )

        def batch_loss(model: ClassifierModel, batch: Batch, rng: Rng):
            log_probs = classifier_forward(model, _as_input(batch.images), training=True, rng=rng)
            _, loss = cross_entropy(log_probs, batch.labels)
            return loss, int((log_probs.data.argmax(axis=1) == batch.labels).sum())

        started = time.perf_counter()
        path = Path(run_dir) / CLASSIFIER_CKPT if run_dir is not None else None
        _fit("classifier", model, dataset, cfg, cfg.epochs, batch_loss, record, path)
        record.wall_clock["classifier"] = time.perf_counter() - started
    return model, record


def _estimator_targets(
    classifier: ClassifierModel, dataset: LabeledDataset, targets: np.ndarray | None
) -> np.ndarray:
    if targets is None:
        targets = compute_target_losses(classifier, dataset)
    if len(targets) != len(dataset):
        raise ContractError(f"{len(targets)} target losses for {len(dataset)} examples")
    return targets


def train_iqn(
    classifier: ClassifierModel,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    targets: np.ndarray | None = None,
    run_dir: str | Path | None = None,
    record: RunRecord | None = None,
) -> tuple[IqnModel, RunRecord]:
    """Regress the classifier's per-example loss distribution with freshly sampled taus."""
    _require_train_split(dataset)
    record = record or RunRecord(config=cfg.snapshot())
    with tc.precision(cfg.precision):
        targets = _estimator_targets(classifier, dataset, targets)
        model = IqnModel(
            dataset.image_shape, Rng(cfg.seed).child("init", "iqn"), dropout_enabled=cfg.dropout_enabled
        )
        transfer_weights(classifier, model)
        if cfg.freeze_backbone:
            for p in model.backbone.parameters():
                p.requires_grad = False

        def batch_loss(model: IqnModel, batch: Batch, rng: Rng):
            taus = sample_taus(rng.child("taus"), len(batch.indices), cfg.n_taus)
            predicted = iqn_forward(model, _as_input(batch.images), taus, training=True, rng=rng.child("dropout"))
            return quantile_loss(predicted, targets[batch.indices], taus, cfg.loss), None

        started = time.perf_counter()
        path = Path(run_dir) / IQN_CKPT if run_dir is not None else None
        _fit("iqn", model, dataset, cfg, cfg.phase2_epochs, batch_loss, record, path)
        record.wall_clock["iqn"] = time.perf_counter() - started
    return model, record


def train_scalar(
    classifier: ClassifierModel,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    targets: np.ndarray | None = None,
    run_dir: str | Path | None = None,
    record: RunRecord | None = None,
) -> tuple[ScalarModel, RunRecord]:
    _require_train_split(dataset)
    record = record or RunRecord(config=cfg.snapshot())
    with tc.precision(cfg.precision):
        targets = _estimator_targets(classifier, dataset, targets)
        model = ScalarModel(
            dataset.image_shape, Rng(cfg.seed).child("init", "scalar"), dropout_enabled=cfg.dropout_enabled
        )
        transfer_weights(classifier, model)
        if cfg.freeze_backbone:
            for p in model.backbone.parameters():
                p.requires_grad = False

        def batch_loss(model: ScalarModel, batch: Batch, rng: Rng):
            predicted = model(_as_input(batch.images), training=True, rng=rng.child("dropout"))
            return mse(predicted, targets[batch.indices].reshape(-1, 1)), None

        started = time.perf_counter()
        path = Path(run_dir) / SCALAR_CKPT if run_dir is not None else None
        _fit("scalar", model, dataset, cfg, cfg.phase2_epochs, batch_loss, record, path)
        record.wall_clock["scalar"] = time.perf_counter() - started
    return model, record


def run_pipeline(
    dataset: LabeledDataset,
    cfg: TrainConfig,
    run_dir: str | Path,
    variants: Iterable[str] = ("iqn", "scalar"),
    extra_metadata: dict[str, Any] | None = None,
) -> RunRecord:
    """Phase 1, target caching and the requested phase-2 estimators, all written to `run_dir`."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config=cfg.snapshot(), code_version=code_version())

    classifier, _ = train_classifier(dataset, cfg, run_dir, record)
    with tc.precision(cfg.precision):
        targets = compute_target_losses(classifier, dataset, run_dir / TARGETS_FILE)
    record.checkpoints["targets"] = str(run_dir / TARGETS_FILE)

    variants = list(variants)
    if "iqn" in variants:
        train_iqn(classifier, dataset, cfg, targets, run_dir, record)
    if "scalar" in variants:
        train_scalar(classifier, dataset, cfg, targets, run_dir, record)

    record.write(run_dir, extra_metadata)
    logger.info("run written to %s", run_dir)
    return record
