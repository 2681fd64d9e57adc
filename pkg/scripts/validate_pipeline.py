#!/usr/bin/env python3
"""
Desk-Scale Pipeline Validation

Trains the classifier and both loss estimators on a 10k-example MNIST subset
(2 + 2 epochs) for three seeds, evaluates each run and checks the directional
results:

    - classifier test accuracy >= 95%
    - mean estimated loss of incorrect predictions >= 2x that of correct ones
    - zeros-probe mean >= dataset mean
    - filtering at N=0 gains >= 0.2 accuracy points
    - IQN kept accuracy at N=0.5 >= scalar kept accuracy on at least 2 of 3 seeds

Usage:
    uv run python scripts/validate_pipeline.py [--data-dir data] [--runs-dir runs/validate]
"""

import argparse
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

# Add src to path for imports
sys.path.insert(0, "src")

from confidence_iqn.config import Settings
from confidence_iqn.data_io import DatasetKind, Split, load_dataset, make_zeros_probe
from confidence_iqn.log import configure_logging
from confidence_iqn.training import DESK_SCALE, DESK_SCALE_SUBSET, run_pipeline
from confidence_iqn.uncertainty import evaluate_run

SEEDS = (7, 8, 9)


@dataclass
class SeedResult:
    """Container for one seed's headline numbers."""
    seed: int
    accuracy: float
    incorrect_mean: float
    correct_mean: float
    zeros_mean: float
    dataset_mean: float
    iqn_kept_n0: float
    iqn_kept_n05: float
    scalar_kept_n05: float
    minutes: float

    @property
    def checks(self) -> dict[str, bool]:
        return {
            "accuracy >= 95%": self.accuracy >= 95.0,
            "incorrect >= 2x correct": self.incorrect_mean >= 2 * self.correct_mean,
            "zeros >= dataset mean": self.zeros_mean >= self.dataset_mean,
            "N=0 gain >= 0.2 pts": self.iqn_kept_n0 >= self.accuracy + 0.2,
        }


def run_seed(seed: int, data_dir: Path, runs_dir: Path) -> SeedResult:
    """Train and evaluate one desk-scale run."""
    print(f"\n{'='*60}")
    print(f"Seed {seed}")
    print(f"{'='*60}")

    started = time.perf_counter()
    cfg = replace(DESK_SCALE, seed=seed)
    train_set = load_dataset(DatasetKind.MNIST, data_dir, Split.TRAIN, subset=DESK_SCALE_SUBSET)
    test_set = load_dataset(DatasetKind.MNIST, data_dir, Split.TEST)
    probe = make_zeros_probe(100, test_set.image_shape, test_set.normalization)

    run_dir = runs_dir / f"mnist-seed{seed}"
    run_pipeline(train_set, cfg, run_dir)
    tables = evaluate_run(run_dir, test_set, probe, seed=seed)

    stats = tables["stats"]
    accuracy = tables["accuracy"].set_index("model")
    result = SeedResult(
        seed=seed,
        accuracy=float(accuracy.loc["IQN", "original"]),
        incorrect_mean=float(stats.loc["Incorrect", "IQN"]),
        correct_mean=float(stats.loc["Correct", "IQN"]),
        zeros_mean=float(stats.loc["Zeros", "IQN"]),
        dataset_mean=float(stats.loc["Mean", "IQN"]),
        iqn_kept_n0=float(accuracy.loc["IQN", "N=0"]),
        iqn_kept_n05=float(accuracy.loc["IQN", "N=0.5"]),
        scalar_kept_n05=float(accuracy.loc["Scalar", "N=0.5"]),
        minutes=(time.perf_counter() - started) / 60,
    )
    for name, passed in result.checks.items():
        print(f"  {name:<26} {'PASS' if passed else 'FAIL'}")
    return result


def print_results_table(results: list[SeedResult]):
    """Print a formatted table of all seeds."""
    print(f"\n{'='*88}")
    print("DETAILED RESULTS")
    print(f"{'='*88}")
    print(f"{'Seed':<6} {'Acc':>8} {'Incorrect':>10} {'Correct':>10} {'Zeros':>10} {'IQN N=0':>9} {'IQN N=.5':>9} {'Sc N=.5':>9} {'Min':>6}")
    print("-" * 88)
    for r in results:
        print(f"{r.seed:<6} {r.accuracy:>7.2f}% {r.incorrect_mean:>10.4g} {r.correct_mean:>10.4g} {r.zeros_mean:>10.4g} {r.iqn_kept_n0:>8.2f}% {r.iqn_kept_n05:>8.2f}% {r.scalar_kept_n05:>8.2f}% {r.minutes:>6.1f}")


def main():
    """Run the desk-scale validation across seeds."""
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    settings = Settings.from_env()
    parser.add_argument("--data-dir", type=Path, default=settings.data_dir)
    parser.add_argument("--runs-dir", type=Path, default=settings.runs_dir / "validate")
    args = parser.parse_args()
    configure_logging(settings.log_level, settings.log_format)

    print("=" * 60)
    print("Desk-Scale MNIST Validation")
    print(f"Subset: {DESK_SCALE_SUBSET} examples, epochs: {DESK_SCALE.epochs} + {DESK_SCALE.phase2_epochs}")
    print(f"Seeds: {', '.join(str(s) for s in SEEDS)}")
    print("=" * 60)

    results = [run_seed(seed, args.data_dir, args.runs_dir) for seed in SEEDS]
    print_results_table(results)

    iqn_wins = sum(r.iqn_kept_n05 >= r.scalar_kept_n05 for r in results)
    all_checks = all(passed for r in results for passed in r.checks.values())
    print(f"\nIQN >= scalar at N=0.5 on {iqn_wins}/{len(results)} seeds")

    print("\n" + "=" * 60)
    ok = all_checks and iqn_wins >= 2
    print("Validation passed!" if ok else "Validation FAILED")
    print("=" * 60)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
