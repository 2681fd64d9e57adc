"""
Losses

Cross-entropy for the classifier, the quantile Huber loss for the IQN and MSE
for the scalar baseline.

Quantile Huber penalty for one residual delta = target - predicted:

    huber_k(d) = d^2 / 2               if |d| <= k
               = k * (|d| - k / 2)     otherwise
    rho(d)     = |tau - 1{d < 0}| * huber_k(d) / k

The batch loss is the mean over examples of the sum over the N sampled taus
(one target sample per example, so the 1/N' factor is 1). Targets are data:
gradients only ever reach `predicted`.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor_core as tc
from .errors import DimensionError, ParameterError
from .tensor_core import Function, Tensor


class QuantileLossMode(Enum):
    HUBER = "huber"
    MSE_PINBALL = "mse-pinball"


@dataclass(frozen=True)
class QuantileLossConfig:
    kappa: float = 1.0
    n_taus: int = 64
    n_target: int = 1
    mode: QuantileLossMode = QuantileLossMode.HUBER

    def __post_init__(self):
        if not self.kappa > 0:
            raise ParameterError(f"kappa must be > 0, got {self.kappa}")
        if self.n_taus < 1:
            raise ParameterError(f"n_taus must be >= 1, got {self.n_taus}")
        if self.n_target != 1:
            raise ParameterError(f"supervised targets give exactly one sample per example, got n_target={self.n_target}")
        object.__setattr__(self, "mode", QuantileLossMode(self.mode))


DEFAULT_QUANTILE_LOSS = QuantileLossConfig()


# ── Classification ───────────────────────────────────────────────────


def cross_entropy(log_probs: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-example negative log-likelihood of the true label, and its batch mean."""
    per_example = tc.scale(tc.pick(log_probs, labels), -1.0)
    return per_example, tc.mean(per_example)


# ── Quantile regression ──────────────────────────────────────────────


def quantile_huber_elem(delta: float, tau: float, kappa: float) -> float:
    weight = abs(tau - (1.0 if delta < 0 else 0.0))
    if abs(delta) <= kappa:
        return weight * 0.5 * delta * delta / kappa
    return weight * (abs(delta) - 0.5 * kappa)


def _check_taus(taus: np.ndarray) -> None:
    if taus.size and (not np.all(np.isfinite(taus)) or taus.min() < 0.0 or taus.max() > 1.0):
        raise ParameterError("every tau must lie in [0, 1]")


def _as_array(values, dtype) -> np.ndarray:
    return (values.data if isinstance(values, Tensor) else np.asarray(values)).astype(dtype, copy=False)


class _QuantileLoss(Function):
    def forward(self, predicted, *, target, taus, kappa, mode):
        delta = target[:, None] - predicted
        weight = np.abs(taus - (delta < 0))
        if mode is QuantileLossMode.MSE_PINBALL:
            penalty = weight * delta * delta
            slope = 2.0 * weight * delta
        else:
            inside = np.abs(delta) <= kappa
            penalty = weight * np.where(inside, 0.5 * delta * delta / kappa, np.abs(delta) - 0.5 * kappa)
            slope = weight * np.where(inside, delta / kappa, np.sign(delta))
        batch = predicted.shape[0]
        # d(loss)/d(predicted) = -d(loss)/d(delta)
        self.local = (-slope / batch).astype(predicted.dtype)
        return np.asarray(penalty.sum() / batch, dtype=predicted.dtype)

    def backward(self, grad):
        return (grad * self.local,)


def quantile_loss(
    predicted: Tensor,
    target_loss,
    taus,
    cfg: QuantileLossConfig = DEFAULT_QUANTILE_LOSS,
) -> Tensor:
    """
    Scalar quantile regression loss of `predicted` (batch x N) against one
    observed loss per example, with taus[b, i] the quantile level of predicted[b, i].
    """
    if predicted.ndim != 2:
        raise DimensionError(f"quantile_loss: predicted must be batch x N, got {predicted.shape}")
    target = _as_array(target_loss, predicted.dtype).reshape(-1)
    taus = _as_array(taus, predicted.dtype)
    if target.shape != (predicted.shape[0],):
        raise DimensionError(f"quantile_loss: target shape {target.shape} vs predicted {predicted.shape}")
    if taus.shape != predicted.shape:
        raise DimensionError(f"quantile_loss: taus shape {taus.shape} vs predicted {predicted.shape}")
    _check_taus(taus)
    return _QuantileLoss.apply(predicted, target=target, taus=taus, kappa=cfg.kappa, mode=cfg.mode)


class _PinballLoss(Function):
    def forward(self, predicted, *, target, taus):
        delta = target - predicted
        weight = np.abs(taus - (delta < 0))
        count = predicted.size
        self.local = (weight * np.sign(delta) / -count).astype(predicted.dtype)
        return np.asarray((weight * np.abs(delta)).sum() / count, dtype=predicted.dtype)

    def backward(self, grad):
        return (grad * self.local,)


def pinball_loss(predicted: Tensor, target, taus) -> Tensor:
    """
    Mean asymmetric absolute error |tau - 1{delta < 0}| * |delta|.

    `taus` is either one level for every element or an array shaped like `predicted`.
    The subgradient at delta = 0 is taken as 0.
    """
    target = _as_array(target, predicted.dtype)
    if target.shape != predicted.shape:
        raise DimensionError(f"pinball_loss: target shape {target.shape} vs predicted {predicted.shape}")
    taus = _as_array(taus, predicted.dtype)
    if taus.ndim == 0:
        taus = np.full(predicted.shape, taus, dtype=predicted.dtype)
    elif taus.shape != predicted.shape:
        raise DimensionError(f"pinball_loss: taus shape {taus.shape} vs predicted {predicted.shape}")
    _check_taus(taus)
    return _PinballLoss.apply(predicted, target=target, taus=taus)


# ── Regression ───────────────────────────────────────────────────────


def mse(predicted: Tensor, target) -> Tensor:
    target = tc.constant(_as_array(target, predicted.dtype))
    if target.shape != predicted.shape:
        raise DimensionError(f"mse: shapes {predicted.shape} and {target.shape} differ")
    diff = tc.sub(predicted, target)
    return tc.mean(tc.elementwise_mul(diff, diff))
