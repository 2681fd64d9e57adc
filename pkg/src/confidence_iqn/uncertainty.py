"""
Uncertainty Estimation and Selective Prediction

Turns a trained estimator into per-example loss scores on the test set and
reports:

    stats.csv          Mean / Std / Incorrect / Correct / Zeros rows, one column per variant
    filter_report.csv  kept/removed counts and accuracies for each threshold N
    accuracy.csv       original classifier accuracy and accuracy after filtering
    coverage.csv       kept fraction vs kept accuracy over a sweep of N
    hist_<id>.csv      histogram of one example's sampled quantile values

The score of an example is the mean of its sampled quantile values (the
expected loss under the estimated distribution). An example is kept when its
score is <= mean + N * std, with mean/std the population statistics of the
calibration scores (the test set unless configured otherwise). Probe examples
never count toward accuracy or calibration.
"""

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import tensor_core as tc
from .checkpoint import load_metadata
from .data_io import PROBE_LABEL, LabeledDataset
from .errors import ContractError, DimensionError, ParameterError
from .models import IqnModel, ScalarModel
from .tensor_core import Rng
from .training import CLASSIFIER_CKPT, RUN_FILE, load_trained, phase_seed, predict_log_probs

logger = logging.getLogger(__name__)

STATS_ROWS = ("Mean", "Std", "Incorrect", "Correct", "Zeros")
VARIANT_LABELS = {"iqn": "IQN", "scalar": "Scalar"}
FLOAT_FORMAT = "%.6g"
STD_CONVENTION = "population"

# rows of (example, tau) pairs pushed through the head at once
_MAX_ROWS = 65_536


# ── Types ────────────────────────────────────────────────────────────


@dataclass
class LossDistributionEstimate:
    example_id: int
    tau_values: np.ndarray
    quantile_values: np.ndarray
    mean: float
    std: float

    @classmethod
    def from_samples(cls, example_id: int, taus: np.ndarray, values: np.ndarray) -> "LossDistributionEstimate":
        if taus.shape != values.shape:
            raise DimensionError(f"{taus.shape} taus for {values.shape} quantile values")
        order = np.argsort(taus, kind="stable")
        values64 = values.astype(np.float64)
        return cls(
            example_id=example_id,
            tau_values=taus[order],
            quantile_values=values[order],
            mean=float(values64.mean()),
            std=float(values64.std()),
        )

    @property
    def num_taus(self) -> int:
        return int(self.tau_values.size)


@dataclass(frozen=True)
class UncertaintyStats:
    dataset_mean: float
    dataset_std: float
    incorrect_mean: float | None
    correct_mean: float | None
    zeros_mean: float | None
    n_correct: int
    n_incorrect: int

    def as_column(self) -> list[float | None]:
        return [self.dataset_mean, self.dataset_std, self.incorrect_mean, self.correct_mean, self.zeros_mean]


@dataclass(frozen=True)
class FilterReport:
    threshold_sigmas: float
    cutoff: float
    kept_count: int
    removed_count: int
    accuracy_kept: float | None
    accuracy_all: float | None
    kept: np.ndarray

    @property
    def total(self) -> int:
        return self.kept_count + self.removed_count

    @property
    def coverage(self) -> float:
        return self.kept_count / self.total if self.total else 0.0


def scores_of(estimates: Sequence[LossDistributionEstimate] | np.ndarray) -> np.ndarray:
    """Per-example scores as float64, from estimates or an array of scores."""
    if isinstance(estimates, np.ndarray):
        return estimates.astype(np.float64).reshape(-1)
    return np.array([e.mean for e in estimates], dtype=np.float64)


# ── Estimation ───────────────────────────────────────────────────────


def _as_batch(images: np.ndarray) -> tc.Tensor:
    return tc.constant(np.asarray(images).astype(tc.default_dtype(), copy=False))


def estimate_distributions(
    iqn: IqnModel,
    images: np.ndarray,
    num_taus: int,
    seed: int,
    example_ids: Sequence[int] | None = None,
    progress: bool = False,
) -> list[LossDistributionEstimate]:
    """
    Eval-mode quantile samples for every image.

    The taus of example i come from the (seed, "eval_taus", id_i) stream, so an
    estimate does not depend on batching or on which other examples are evaluated.
    """
    if num_taus < 1:
        raise ParameterError(f"num_taus must be >= 1, got {num_taus}")
    images = np.asarray(images)
    ids = list(range(len(images))) if example_ids is None else [int(i) for i in example_ids]
    if len(ids) != len(images):
        raise DimensionError(f"{len(ids)} example ids for {len(images)} images")

    root = Rng(seed).child("eval_taus")
    chunk = max(1, _MAX_ROWS // num_taus)
    estimates: list[LossDistributionEstimate] = []
    with tc.no_grad():
        for start in tqdm(range(0, len(images), chunk), disable=not progress, desc="estimate", leave=False):
            batch_ids = ids[start : start + chunk]
            taus = np.stack([root.child(i).uniform(0.0, 1.0, num_taus) for i in batch_ids])
            taus = taus.astype(tc.default_dtype())
            features = iqn.backbone(_as_batch(images[start : start + chunk]), training=False)
            values = iqn.quantiles(features, taus).data
            estimates.extend(
                LossDistributionEstimate.from_samples(i, t, v) for i, t, v in zip(batch_ids, taus, values)
            )
    return estimates


def estimate_distribution(
    iqn: IqnModel, example: np.ndarray, num_taus: int, seed: int = 0, example_id: int = 0
) -> LossDistributionEstimate:
    """Loss distribution of one c x h x w example."""
    example = np.asarray(example)
    return estimate_distributions(iqn, example[None, ...], num_taus, seed, [example_id])[0]


def estimate_scalars(scalar_model: ScalarModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outputs = []
    with tc.no_grad():
        for start in range(0, len(images), batch_size):
            outputs.append(scalar_model(_as_batch(images[start : start + batch_size]), training=False).data)
    return np.concatenate(outputs).reshape(-1).astype(np.float64) if outputs else np.zeros(0)


def estimate_scalar(scalar_model: ScalarModel, example: np.ndarray) -> float:
    return float(estimate_scalars(scalar_model, np.asarray(example)[None, ...])[0])


# ── Statistics and filtering ─────────────────────────────────────────


def _correctness(predictions: np.ndarray, labels: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != (n,) or labels.shape != (n,):
        raise DimensionError(f"{n} scores but predictions {predictions.shape} and labels {labels.shape}")
    counted = labels != PROBE_LABEL
    return predictions == labels, counted


def compute_stats(
    estimates: Sequence[LossDistributionEstimate] | np.ndarray,
    classifier_predictions: np.ndarray,
    labels: np.ndarray,
    zeros_estimates: Sequence[LossDistributionEstimate] | np.ndarray | None = None,
) -> UncertaintyStats:
    scores = scores_of(estimates)
    correct, counted = _correctness(classifier_predictions, labels, scores.size)
    scores, correct = scores[counted], correct[counted]
    if scores.size == 0:
        raise ContractError("no labelled examples to compute statistics over")
    zeros = scores_of(zeros_estimates) if zeros_estimates is not None else np.zeros(0)

    def group_mean(values: np.ndarray) -> float | None:
        return float(values.mean()) if values.size else None

    return UncertaintyStats(
        dataset_mean=float(scores.mean()),
        dataset_std=float(scores.std()),
        incorrect_mean=group_mean(scores[~correct]),
        correct_mean=group_mean(scores[correct]),
        zeros_mean=group_mean(zeros),
        n_correct=int(correct.sum()),
        n_incorrect=int((~correct).sum()),
    )


def filter_by_threshold(
    estimates: Sequence[LossDistributionEstimate] | np.ndarray,
    predictions: np.ndarray,
    labels: np.ndarray,
    n_sigmas: float,
    calibration: Sequence[LossDistributionEstimate] | np.ndarray | None = None,
) -> FilterReport:
    """Keep examples whose score is <= mean + n_sigmas * std of the calibration scores."""
    if math.isnan(n_sigmas):
        raise ParameterError("n_sigmas must not be NaN")
    scores = scores_of(estimates)
    correct, counted = _correctness(predictions, labels, scores.size)
    scores, correct = scores[counted], correct[counted]
    reference = scores if calibration is None else scores_of(calibration)
    if reference.size == 0:
        raise ContractError("no calibration scores")

    if math.isinf(n_sigmas):
        cutoff = math.copysign(math.inf, n_sigmas)
    else:
        cutoff = float(reference.mean() + n_sigmas * reference.std())
    kept = scores <= cutoff
    kept_count = int(kept.sum())
    return FilterReport(
        threshold_sigmas=float(n_sigmas),
        cutoff=cutoff,
        kept_count=kept_count,
        removed_count=int(scores.size - kept_count),
        accuracy_kept=float(correct[kept].mean()) if kept_count else None,
        accuracy_all=float(correct.mean()) if correct.size else None,
        kept=kept,
    )


def sweep_thresholds(
    estimates: Sequence[LossDistributionEstimate] | np.ndarray,
    predictions: np.ndarray,
    labels: np.ndarray,
    n_points: int = 21,
    low: float = -2.0,
    high: float = 3.0,
    calibration: Sequence[LossDistributionEstimate] | np.ndarray | None = None,
) -> pd.DataFrame:
    """Coverage and kept accuracy for N on an even grid from `low` to `high`."""
    if n_points < 2:
        raise ParameterError(f"n_points must be >= 2, got {n_points}")
    rows = []
    for n_sigmas in np.linspace(low, high, n_points):
        report = filter_by_threshold(estimates, predictions, labels, float(n_sigmas), calibration)
        rows.append(
            {
                "n_sigmas": float(n_sigmas),
                "cutoff": report.cutoff,
                "coverage": report.coverage,
                "accuracy_kept": report.accuracy_kept if report.accuracy_kept is not None else np.nan,
            }
        )
    return pd.DataFrame(rows)


# ── Histograms ───────────────────────────────────────────────────────


def histogram_frame(estimate: LossDistributionEstimate, bins: int, mean_marker: float) -> pd.DataFrame:
    if bins < 1:
        raise ParameterError(f"bins must be >= 1, got {bins}")
    values = estimate.quantile_values.astype(np.float64)
    low, high = float(values.min()), float(values.max())
    if low == high:
        low, high = low - 0.5, high + 0.5
    counts, edges = np.histogram(values, bins=bins, range=(low, high))
    frame = pd.DataFrame(
        {"kind": "bin", "bin_left": edges[:-1], "bin_right": edges[1:], "count": counts.astype(np.int64)}
    )
    marker = pd.DataFrame([{"kind": "mean_marker", "bin_left": mean_marker, "bin_right": mean_marker, "count": 0}])
    return pd.concat([frame, marker], ignore_index=True)


def export_histogram(
    estimate: LossDistributionEstimate, bins: int, path: str | Path, mean_marker: float | None = None
) -> Path:
    """
    Write a histogram of the sampled quantile values.

    The trailing `mean_marker` row holds the dataset mean score (the estimate's
    own mean when none is given) in both bin columns, with count 0.
    """
    path = Path(path)
    frame = histogram_frame(estimate, bins, estimate.mean if mean_marker is None else mean_marker)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as exc:
        raise OSError(f"cannot write histogram {path}: {exc}") from exc
    return path


# ── Run evaluation ───────────────────────────────────────────────────


def predict_labels(classifier, images: np.ndarray) -> np.ndarray:
    return predict_log_probs(classifier, images).argmax(axis=1)


def _scores_for(
    variant: str,
    model,
    dataset: LabeledDataset,
    num_taus: int,
    seed: int,
    progress: bool,
) -> np.ndarray:
    if variant == "scalar":
        return estimate_scalars(model, dataset.images.data)
    # probe, test and calibration sets draw their taus from separate streams
    stream_seed = phase_seed(seed, f"eval:{dataset.source}:{dataset.split.value}")
    return scores_of(estimate_distributions(model, dataset.images.data, num_taus, stream_seed, progress=progress))


def _pct(value: float | None) -> float:
    return 100.0 * value if value is not None else np.nan


def evaluate_run(
    run_dir: str | Path,
    test_set: LabeledDataset,
    probe: LabeledDataset,
    variants: Sequence[str] = ("iqn", "scalar"),
    thresholds: Sequence[float] = (0.0, 0.5, 1.0),
    num_taus: int = 64,
    seed: int | None = None,
    calibration_set: LabeledDataset | None = None,
    coverage_points: int = 21,
    progress: bool = False,
) -> dict[str, pd.DataFrame]:
    """
    Score the test set and probe with each trained estimator of a run and write
    stats.csv, filter_report.csv, accuracy.csv and coverage.csv into `run_dir`.

    Classification predictions always come from the run's phase-1 classifier.
    """
    run_dir = Path(run_dir)
    classifier = load_trained(run_dir, "classifier")
    meta = load_metadata(run_dir / CLASSIFIER_CKPT)
    seed = int(meta.get("seed", 0)) if seed is None else seed
    predictions = predict_labels(classifier, test_set.images.data)
    labels = test_set.labels
    accuracy_all = float((predictions == labels).mean())
    baseline = "Dropout" if meta["dropout_enabled"] else "No Dropout"

    stats = pd.DataFrame(index=list(STATS_ROWS))
    stats.index.name = "row"
    filter_rows, coverage_frames = [], []
    accuracy_rows: list[dict[str, Any]] = [{"model": baseline, "original": _pct(accuracy_all)}]

    for variant in variants:
        model = load_trained(run_dir, variant)
        label = VARIANT_LABELS[variant]
        test_scores = _scores_for(variant, model, test_set, num_taus, seed, progress)
        zeros_scores = _scores_for(variant, model, probe, num_taus, seed, progress)
        calibration = (
            _scores_for(variant, model, calibration_set, num_taus, seed, progress)
            if calibration_set is not None
            else None
        )

        summary = compute_stats(test_scores, predictions, labels, zeros_scores)
        stats[label] = pd.Series(summary.as_column(), index=stats.index, dtype=float)
        logger.info(
            "%s: incorrect=%s correct=%s zeros=%s",
            label, summary.incorrect_mean, summary.correct_mean, summary.zeros_mean,
            extra={"fields": {"variant": variant, **asdict(summary)}},
        )

        accuracy_row: dict[str, Any] = {"model": label, "original": _pct(accuracy_all)}
        for n_sigmas in thresholds:
            report = filter_by_threshold(test_scores, predictions, labels, n_sigmas, calibration)
            filter_rows.append(
                {
                    "variant": label,
                    "n_sigmas": report.threshold_sigmas,
                    "cutoff": report.cutoff,
                    "kept": report.kept_count,
                    "removed": report.removed_count,
                    "accuracy_all": _pct(report.accuracy_all),
                    "accuracy_kept": _pct(report.accuracy_kept),
                }
            )
            accuracy_row[f"N={n_sigmas:g}"] = _pct(report.accuracy_kept)
        accuracy_rows.append(accuracy_row)

        sweep = sweep_thresholds(test_scores, predictions, labels, coverage_points, calibration=calibration)
        sweep.insert(0, "variant", label)
        coverage_frames.append(sweep)

    tables = {
        "stats": stats,
        "filter_report": pd.DataFrame(filter_rows),
        "accuracy": pd.DataFrame(accuracy_rows),
        "coverage": pd.concat(coverage_frames, ignore_index=True) if coverage_frames else pd.DataFrame(),
    }
    tables["stats"].to_csv(run_dir / "stats.csv", float_format=FLOAT_FORMAT)
    for name in ("filter_report", "accuracy", "coverage"):
        tables[name].to_csv(run_dir / f"{name}.csv", index=False, float_format=FLOAT_FORMAT)

    _record_evaluation(
        run_dir,
        {
            "variants": list(variants),
            "thresholds": [float(t) for t in thresholds],
            "num_taus": num_taus,
            "seed": seed,
            "calibration": "test" if calibration_set is None else "train",
            "std_convention": STD_CONVENTION,
        },
    )
    return tables


def _record_evaluation(run_dir: Path, evaluation: dict[str, Any]) -> None:
    path = run_dir / RUN_FILE
    payload = json.loads(path.read_text()) if path.exists() else {}
    payload["evaluation"] = evaluation
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
