"""
Quantile Oracle Suites

Dataset-free checks of the quantile regression machinery against sorting
oracles:

    pinball argmin   brute-force minimizer of the pinball loss over candidates
    distributions    constant predictor fitted by gradient descent on
                     uniform / gaussian / bimodal samples vs the empirical quantile
    constant target  every quantile of a constant target is the constant
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import tensor_core as tc
from .data_io import ScalarDistribution, make_synthetic_scalar_dataset
from .losses import QuantileLossConfig, pinball_loss, quantile_loss
from .tensor_core import Parameter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleCase:
    suite: str
    distribution: str
    tau: float
    fitted: float
    oracle: float
    tolerance: float

    @property
    def error(self) -> float:
        return abs(self.fitted - self.oracle)

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def empirical_quantile(samples: np.ndarray, tau: float) -> float:
    """Smallest sample with at least a tau fraction of the samples at or below it."""
    ordered = np.sort(np.asarray(samples, dtype=np.float64))
    index = max(math.ceil(tau * ordered.size) - 1, 0)
    return float(ordered[index])


def pinball_argmin(samples: np.ndarray, tau: float, candidates: np.ndarray) -> np.ndarray:
    """Every candidate constant that minimizes the pinball loss (ties included)."""
    samples = np.asarray(samples, dtype=np.float64)
    with tc.precision(np.float64), tc.no_grad():
        losses = np.array(
            [pinball_loss(tc.constant(np.full(samples.shape, c)), samples, tau).item() for c in candidates]
        )
    return np.asarray(candidates)[np.isclose(losses, losses.min(), rtol=0, atol=1e-12)]


def fit_constant_quantile(
    samples: np.ndarray,
    tau: float,
    steps: int = 500,
    lr: float = 1.0,
    mode: str = "pinball",
) -> float:
    """
    Plain gradient descent on one constant prediction for every sample.

    With the pinball loss the gradient is F(w) - tau (F the empirical CDF), so a
    fixed step converges wherever the sample density is below 2 / lr.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    with tc.precision(np.float64):
        w = Parameter(np.zeros(1))
        cfg = QuantileLossConfig(kappa=1.0, n_taus=n)
        for _ in range(steps):
            w.zero_grad()
            predicted = tc.tile_rows(w, n)
            if mode == "huber":
                loss = quantile_loss(tc.reshape(predicted, (1, n)), samples[:1], np.full((1, n), tau), cfg)
                loss = tc.scale(loss, 1.0 / n)
            else:
                loss = pinball_loss(predicted, samples, tau)
            tc.backward(loss)
            w.data -= lr * w.grad
    return float(w.data[0])


def run_oracle_suite(n: int = 100_000, seed: int = 0, steps: int = 500) -> pd.DataFrame:
    """All oracle cases as a table with a `passed` column."""
    cases: list[OracleCase] = []

    candidates = np.arange(1, 101, dtype=np.float64)
    minimizers = pinball_argmin(candidates, 0.75, candidates)
    cases.append(OracleCase("pinball_argmin", "integers 1..100", 0.75, float(minimizers.min()), 75.5, 0.5))
    cases.append(OracleCase("pinball_argmin", "integers 1..100", 0.75, float(minimizers.max()), 75.5, 0.5))

    levels = {
        ScalarDistribution.UNIFORM: (0.1, 0.5, 0.9),
        ScalarDistribution.GAUSSIAN: (0.1, 0.5, 0.9),
        # the median of the mixture sits in the empty gap between modes
        ScalarDistribution.BIMODAL: (0.25, 0.75),
    }
    tolerance = 2.0 / math.sqrt(n) + 0.01
    for dist, taus in levels.items():
        samples = make_synthetic_scalar_dataset(dist, n, seed)
        for tau in taus:
            fitted = fit_constant_quantile(samples, tau, steps)
            cases.append(OracleCase("distribution", dist.value, tau, fitted, empirical_quantile(samples, tau), tolerance))

    constant = 1.5
    for tau in (0.1, 0.5, 0.9):
        fitted = fit_constant_quantile(np.full(1000, constant), tau, steps=200, mode="huber")
        cases.append(OracleCase("constant_target", f"constant {constant}", tau, fitted, constant, 1e-6))

    table = pd.DataFrame(
        [{**vars(c), "error": c.error, "passed": c.passed} for c in cases]
    )
    failed = int((~table["passed"]).sum())
    logger.info("oracle suite: %d cases, %d failed", len(table), failed)
    return table
