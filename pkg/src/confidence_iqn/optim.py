"""
Optimizer

Adadelta with a global learning rate, plus a per-epoch step decay:

    sq_avg    <- rho * sq_avg + (1 - rho) * g^2
    delta     <- -sqrt(acc_delta + eps) / sqrt(sq_avg + eps) * g
    acc_delta <- rho * acc_delta + (1 - rho) * delta^2
    param     <- param + lr * delta

and lr_e = lr_0 * gamma^(e // step_every) after e finished epochs.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParameterError
from .tensor_core import Parameter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdadeltaConfig:
    lr: float = 1.0
    rho: float = 0.9
    eps: float = 1e-6
    gamma: float = 0.7
    step_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.rho < 1.0:
            raise ParameterError(f"rho must lie in [0, 1), got {self.rho}")
        if not self.eps > 0:
            raise ParameterError(f"eps must be > 0, got {self.eps}")
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if self.step_every < 1:
            raise ParameterError(f"step_every must be >= 1, got {self.step_every}")


DEFAULT_ADADELTA = AdadeltaConfig()


@dataclass
class AdadeltaState:
    """Per-parameter accumulators keyed by parameter name."""

    rho: float = 0.9
    eps: float = 1e-6
    lr: float = 1.0
    sq_avg: dict[str, np.ndarray] = field(default_factory=dict)
    acc_delta: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def to_tensors(self, prefix: str = "optim") -> dict[str, np.ndarray]:
        """Accumulators as checkpoint entries; scalars go through `hyperparameters`."""
        out = {f"{prefix}.sq_avg.{name}": a for name, a in self.sq_avg.items()}
        out.update({f"{prefix}.acc_delta.{name}": a for name, a in self.acc_delta.items()})
        return out

    def hyperparameters(self) -> dict[str, float | int]:
        """JSON-ready scalars; the tensor container would round them to float32."""
        return {"rho": self.rho, "eps": self.eps, "lr": self.lr, "steps": self.steps}

    @classmethod
    def from_tensors(
        cls,
        tensors: Mapping[str, np.ndarray],
        hyperparameters: Mapping[str, float | int] | None,
        prefix: str = "optim",
    ) -> "AdadeltaState":
        missing = {"rho", "eps", "lr", "steps"} - set(hyperparameters or {})
        if missing:
            raise ContractError(f"checkpoint holds no optimizer state under {prefix!r} (missing {sorted(missing)})")
        state = cls(
            rho=float(hyperparameters["rho"]),
            eps=float(hyperparameters["eps"]),
            lr=float(hyperparameters["lr"]),
            steps=int(hyperparameters["steps"]),
        )
        for key, array in tensors.items():
            if key.startswith(f"{prefix}.sq_avg."):
                state.sq_avg[key.removeprefix(f"{prefix}.sq_avg.")] = np.array(array)
            elif key.startswith(f"{prefix}.acc_delta."):
                state.acc_delta[key.removeprefix(f"{prefix}.acc_delta.")] = np.array(array)
        return state


def adadelta_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray | None],
    state: AdadeltaState,
) -> None:
    """Apply one Adadelta update in place to every parameter in `params`."""
    rho, eps = state.rho, state.eps
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ContractError(f"no gradient for parameter {name!r}; call backward before stepping")
        if grad.shape != param.shape:
            raise ContractError(f"gradient for {name!r} has shape {grad.shape}, parameter {param.shape}")
        dtype = param.dtype
        sq_avg = state.sq_avg.setdefault(name, np.zeros(param.shape, dtype=dtype))
        acc_delta = state.acc_delta.setdefault(name, np.zeros(param.shape, dtype=dtype))

        sq_avg *= dtype.type(rho)
        sq_avg += dtype.type(1.0 - rho) * grad * grad
        delta = -np.sqrt(acc_delta + dtype.type(eps)) / np.sqrt(sq_avg + dtype.type(eps)) * grad
        acc_delta *= dtype.type(rho)
        acc_delta += dtype.type(1.0 - rho) * delta * delta
        param.data += dtype.type(state.lr) * delta
    state.steps += 1


class Adadelta:
    """Binds a parameter set to an AdadeltaState."""

    def __init__(self, params: Mapping[str, Parameter], config: AdadeltaConfig = DEFAULT_ADADELTA):
        self.params = dict(params)
        self.state = AdadeltaState(rho=config.rho, eps=config.eps, lr=config.lr)

    @property
    def trainable(self) -> dict[str, Parameter]:
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        trainable = self.trainable
        adadelta_step(trainable, {name: p.grad for name, p in trainable.items()}, self.state)

    def set_lr(self, lr: float) -> None:
        self.state.lr = lr


@dataclass
class StepLrSchedule:
    initial_lr: float = 1.0
    gamma: float = 0.7
    step_every: int = 1
    epochs_elapsed: int = 0

    @property
    def current_lr(self) -> float:
        return self.initial_lr * self.gamma ** (self.epochs_elapsed // self.step_every)

    @classmethod
    def from_config(cls, config: AdadeltaConfig) -> "StepLrSchedule":
        return cls(initial_lr=config.lr, gamma=config.gamma, step_every=config.step_every)


def schedule_epoch_end(schedule: StepLrSchedule) -> float:
    """Advance one epoch and return the learning rate for the next one."""
    schedule.epochs_elapsed += 1
    return schedule.current_lr
