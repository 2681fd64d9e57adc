"""
Command-line entry point.

    confidence-iqn train        phase 1 + target cache + phase 2, writes runs/<name>/
    confidence-iqn evaluate     stats.csv, filter_report.csv, accuracy.csv, coverage.csv
    confidence-iqn hist         hist_<id>.csv for test examples or the zeros probe
    confidence-iqn oracle-test  dataset-free quantile convergence suites

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from . import __version__
from .config import Calibration, CliConfig, Settings, Variant, resolve_config
from .data_io import DatasetKind, Split, load_dataset, make_zeros_probe
from .errors import ConfidenceIqnError, ConfigError, ParameterError
from .log import configure_logging
from .losses import QuantileLossMode
from .oracle import run_oracle_suite
from .training import load_trained, phase_seed, run_pipeline
from .uncertainty import (
    FLOAT_FORMAT,
    STD_CONVENTION,
    estimate_distribution,
    estimate_distributions,
    export_histogram,
    evaluate_run,
    scores_of,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

HIST_NUM_TAUS = 10_000


# ── Argument parsing ─────────────────────────────────────────────────


def _floats(raw: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}") from exc


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value run config file")
    parser.add_argument("--dataset", choices=[k.value for k in DatasetKind])
    parser.add_argument("--data-dir", dest="data_dir", type=Path)
    parser.add_argument("--runs-dir", dest="runs_dir", type=Path)
    parser.add_argument("--run-name", dest="run_name")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--variant", choices=[v.value for v in Variant])
    parser.add_argument("--precision", choices=["float32", "float64"])
    parser.add_argument("--norm-mean", dest="norm_mean", type=_floats)
    parser.add_argument("--norm-std", dest="norm_std", type=_floats)
    parser.add_argument("--progress", action="store_const", const=True, help="show progress bars")
    parser.add_argument("--log-level", dest="log_level")
    parser.add_argument("--log-format", dest="log_format", choices=["text", "json"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confidence-iqn",
        description="Estimate a classifier's per-example loss distribution and filter unreliable predictions.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train the classifier and the loss estimators")
    _add_common(train)
    train.add_argument("--epochs", type=int)
    train.add_argument("--estimator-epochs", dest="estimator_epochs", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--no-dropout", dest="dropout", action="store_const", const=False)
    train.add_argument("--n-taus", dest="n_taus", type=int)
    train.add_argument("--kappa", type=float)
    train.add_argument("--loss-mode", dest="loss_mode", choices=[m.value for m in QuantileLossMode])
    train.add_argument("--freeze-backbone", dest="freeze_backbone", action="store_const", const=True)
    train.add_argument("--subset", type=int, help="train on the first N examples")
    train.add_argument("--lr", type=float)
    train.add_argument("--rho", type=float)
    train.add_argument("--eps", type=float)
    train.add_argument("--gamma", type=float)
    train.add_argument("--resume", action="store_const", const=True)

    evaluate = commands.add_parser("evaluate", help="write statistics and filtering tables for a run")
    _add_common(evaluate)
    evaluate.add_argument("--thresholds", type=_floats, help="comma-separated N values (default 0,0.5,1)")
    evaluate.add_argument("--num-taus", dest="num_taus", type=int)
    evaluate.add_argument("--calibration", choices=[c.value for c in Calibration])
    evaluate.add_argument("--coverage-points", dest="coverage_points", type=int)
    evaluate.add_argument("--probe-size", dest="probe_size", type=int)

    hist = commands.add_parser("hist", help="histogram of one example's estimated loss distribution")
    _add_common(hist)
    target = hist.add_mutually_exclusive_group(required=True)
    target.add_argument("--zeros", action="store_true", help="the pitch-black probe image")
    target.add_argument("--id", dest="ids", type=int, action="append", help="test example index (repeatable)")
    hist.add_argument("--bins", type=int, default=50)
    hist.add_argument("--num-taus", dest="num_taus", type=int, default=HIST_NUM_TAUS)

    oracle = commands.add_parser("oracle-test", help="quantile convergence checks against sorting oracles")
    oracle.add_argument("--samples", type=int, default=100_000)
    oracle.add_argument("--seed", type=int, default=0)
    oracle.add_argument("--log-level", dest="log_level")
    oracle.add_argument("--log-format", dest="log_format", choices=["text", "json"])
    return parser


_NOT_CONFIG = {"command", "config", "log_level", "log_format", "zeros", "ids", "bins", "samples"}


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG and v is not None}


def _resolve(settings: Settings, args: argparse.Namespace) -> CliConfig:
    config = resolve_config(settings, args.config, _overrides(args))
    # later subcommands inherit the run's own config unless one was given explicitly
    if args.command != "train" and args.config is None:
        saved = config.run_dir / "config"
        if saved.is_file():
            config = resolve_config(settings, saved, _overrides(args))
    return config


# ── Subcommands ──────────────────────────────────────────────────────


def cmd_train(config: CliConfig) -> int:
    train_cfg = config.train_config()
    normalization = config.normalization
    dataset = load_dataset(config.dataset, config.data_dir, Split.TRAIN, normalization, config.subset)
    run_dir = config.run_dir
    config.write(run_dir / "config")
    logger.info("training %s on %d examples into %s", config.variant.value, len(dataset), run_dir)

    record = run_pipeline(
        dataset,
        train_cfg,
        run_dir,
        config.variant.names,
        extra_metadata={
            "normalization": {"mean": list(normalization.mean), "std": list(normalization.std)},
            "dataset_source": dataset.source,
            "train_examples": len(dataset),
            "subset": config.subset,
            "std_convention": STD_CONVENTION,
        },
    )
    print(f"Run directory: {run_dir}")
    print(record.metrics_frame().to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    return EXIT_OK


def cmd_evaluate(config: CliConfig) -> int:
    normalization = config.normalization
    test_set = load_dataset(config.dataset, config.data_dir, Split.TEST, normalization)
    probe = make_zeros_probe(config.probe_size, test_set.image_shape, normalization)
    calibration_set = None
    if config.calibration is Calibration.TRAIN:
        calibration_set = load_dataset(config.dataset, config.data_dir, Split.TRAIN, normalization, config.subset)

    tables = evaluate_run(
        config.run_dir,
        test_set,
        probe,
        variants=config.variant.names,
        thresholds=config.thresholds,
        num_taus=config.num_taus,
        seed=config.seed,
        calibration_set=calibration_set,
        coverage_points=config.coverage_points,
        progress=config.progress,
    )
    print("=" * 60)
    print("Loss statistics")
    print("=" * 60)
    print(tables["stats"].to_string(na_rep="-", float_format=lambda v: FLOAT_FORMAT % v))
    print()
    print("Accuracy (%)")
    print(tables["accuracy"].to_string(index=False, na_rep="-", float_format=lambda v: f"{v:.2f}"))
    return EXIT_OK


def _dataset_mean_marker(run_dir: Path, iqn, test_set, seed: int) -> float:
    stats_path = run_dir / "stats.csv"
    if stats_path.is_file():
        stats = pd.read_csv(stats_path, index_col="row")
        if "IQN" in stats.columns and not pd.isna(stats.loc["Mean", "IQN"]):
            return float(stats.loc["Mean", "IQN"])
    scores = scores_of(estimate_distributions(iqn, test_set.images.data, 64, phase_seed(seed, "hist-marker")))
    return float(scores.mean())


def cmd_hist(config: CliConfig, zeros: bool, ids: list[int] | None, bins: int) -> int:
    run_dir = config.run_dir
    iqn = load_trained(run_dir, "iqn")
    normalization = config.normalization
    test_set = load_dataset(config.dataset, config.data_dir, Split.TEST, normalization)
    seed = config.seed or 0

    targets: list[tuple[str, np.ndarray, int]] = []
    if zeros:
        probe = make_zeros_probe(1, test_set.image_shape, normalization)
        targets.append(("zeros", probe.images.data[0], 0))
    for example_id in ids or []:
        if not 0 <= example_id < len(test_set):
            raise ParameterError(f"example id {example_id} out of range for {len(test_set)} test examples")
        targets.append((str(example_id), test_set.images.data[example_id], example_id))

    marker = _dataset_mean_marker(run_dir, iqn, test_set, seed)
    for label, image, example_id in targets:
        estimate = estimate_distribution(iqn, image, config.num_taus, phase_seed(seed, f"hist:{label}"), example_id)
        path = export_histogram(estimate, bins, run_dir / f"hist_{label}.csv", marker)
        print(f"{path}: mean={estimate.mean:.6g} std={estimate.std:.6g} (dataset mean {marker:.6g})")
    return EXIT_OK


def cmd_oracle(samples: int, seed: int) -> int:
    table = run_oracle_suite(samples, seed)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    failed = int((~table["passed"]).sum())
    print(f"\n{len(table) - failed}/{len(table)} oracle cases passed")
    return EXIT_OK if failed == 0 else EXIT_FAILURE


# ── Entry point ──────────────────────────────────────────────────────


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings.from_env()
        configure_logging(args.log_level or settings.log_level, args.log_format or settings.log_format)
        if args.command == "oracle-test":
            return cmd_oracle(args.samples, args.seed)
        config = _resolve(settings, args)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "evaluate":
            return cmd_evaluate(config)
        return cmd_hist(config, args.zeros, args.ids, args.bins)
    except ConfigError as exc:
        print(f"confidence-iqn: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfidenceIqnError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"confidence-iqn: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
