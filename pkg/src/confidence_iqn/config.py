"""
Configuration

Two layers:

    Settings   process-wide defaults from the environment (and a `.env` file):
               CONFIDENCE_IQN_DATA_DIR, CONFIDENCE_IQN_RUNS_DIR,
               CONFIDENCE_IQN_LOG_LEVEL, CONFIDENCE_IQN_LOG_FORMAT
    CliConfig  one run's resolved configuration: `key=value` file values with
               command-line flags on top. Written back to `runs/<name>/config`
               in the same format, so `--config runs/<name>/config` reproduces it.
"""

import os
from collections.abc import Callable, Mapping
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any

from dotenv import dotenv_values, load_dotenv

from .data_io import DatasetKind, Normalization
from .errors import ConfigError, ParameterError
from .losses import QuantileLossConfig, QuantileLossMode
from .optim import AdadeltaConfig
from .training import TrainConfig


@dataclass(frozen=True)
class Settings:
    data_dir: Path = Path("data")
    runs_dir: Path = Path("runs")
    log_level: str = "INFO"
    log_format: str = "text"

    @classmethod
    def from_env(cls) -> "Settings":
        load_dotenv()
        log_format = os.getenv("CONFIDENCE_IQN_LOG_FORMAT", "text").lower()
        if log_format not in ("text", "json"):
            raise ConfigError(f"CONFIDENCE_IQN_LOG_FORMAT must be text or json, got {log_format!r}")
        return cls(
            data_dir=Path(os.getenv("CONFIDENCE_IQN_DATA_DIR", "data")),
            runs_dir=Path(os.getenv("CONFIDENCE_IQN_RUNS_DIR", "runs")),
            log_level=os.getenv("CONFIDENCE_IQN_LOG_LEVEL", "INFO").upper(),
            log_format=log_format,
        )


class Variant(Enum):
    IQN = "iqn"
    SCALAR = "scalar"
    BOTH = "both"

    @property
    def names(self) -> tuple[str, ...]:
        return ("iqn", "scalar") if self is Variant.BOTH else (self.value,)


class Calibration(Enum):
    TEST = "test"
    TRAIN = "train"


@dataclass(frozen=True)
class CliConfig:
    dataset: DatasetKind = DatasetKind.MNIST
    variant: Variant = Variant.BOTH
    data_dir: Path = Path("data")
    runs_dir: Path = Path("runs")
    run_name: str = ""
    seed: int | None = None
    epochs: int = 20
    estimator_epochs: int | None = None
    batch_size: int = 64
    dropout: bool = True
    n_taus: int = 64
    kappa: float = 1.0
    loss_mode: QuantileLossMode = QuantileLossMode.HUBER
    freeze_backbone: bool = False
    subset: int | None = None
    thresholds: tuple[float, ...] = (0.0, 0.5, 1.0)
    num_taus: int = 64
    coverage_points: int = 21
    probe_size: int = 100
    calibration: Calibration = Calibration.TEST
    precision: str = "float32"
    norm_mean: tuple[float, ...] | None = None
    norm_std: tuple[float, ...] | None = None
    lr: float = 1.0
    rho: float = 0.9
    eps: float = 1e-6
    gamma: float = 0.7
    progress: bool = False
    resume: bool = False

    @property
    def name(self) -> str:
        if self.run_name:
            return self.run_name
        if self.seed is None:
            raise ConfigError("cannot name the run directory: pass --run-name or --seed")
        return f"{self.dataset.value}-seed{self.seed}"

    @property
    def run_dir(self) -> Path:
        return self.runs_dir / self.name

    @property
    def normalization(self) -> Normalization:
        default = self.dataset.normalization
        try:
            return Normalization(
                mean=self.norm_mean if self.norm_mean is not None else default.mean,
                std=self.norm_std if self.norm_std is not None else default.std,
            )
        except ParameterError as exc:
            raise ConfigError(f"invalid normalization: {exc}") from exc

    def train_config(self) -> TrainConfig:
        if self.seed is None:
            raise ConfigError("seed is required for training (pass --seed)")
        try:
            return TrainConfig(
                seed=self.seed,
                dataset=self.dataset,
                epochs=self.epochs,
                estimator_epochs=self.estimator_epochs,
                batch_size=self.batch_size,
                dropout_enabled=self.dropout,
                n_taus=self.n_taus,
                precision=self.precision,
                freeze_backbone=self.freeze_backbone,
                optimizer=AdadeltaConfig(lr=self.lr, rho=self.rho, eps=self.eps, gamma=self.gamma),
                loss=QuantileLossConfig(kappa=self.kappa, n_taus=self.n_taus, mode=self.loss_mode),
                progress=self.progress,
                resume=self.resume,
            )
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc

    def to_text(self) -> str:
        """The `key=value` form read back by `load_config`."""
        return "".join(f"{f.name}={_render(getattr(self, f.name))}\n" for f in fields(self))

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "CliConfig | None" = None) -> "CliConfig":
        """Apply string (or already typed) values on top of `base`; unknown keys are errors."""
        unknown = sorted(set(values) - set(_PARSERS))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        parsed = {}
        for key, raw in values.items():
            try:
                parsed[key] = _PARSERS[key](raw) if isinstance(raw, str) or raw is None else raw
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"invalid value for {key}: {raw!r} ({exc})") from exc
        return replace(base or cls(), **parsed)


def _render(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _optional(parse: Callable[[str], Any]) -> Callable[[str | None], Any]:
    def parse_optional(raw: str | None) -> Any:
        if raw is None or raw.strip() in ("", "none"):
            return None
        return parse(raw)

    return parse_optional


def _float_tuple(raw: str) -> tuple[float, ...]:
    return tuple(float(part) for part in raw.split(",") if part.strip())


def _precision(raw: str) -> str:
    value = raw.strip()
    if value not in ("float32", "float64"):
        raise ValueError("expected float32 or float64")
    return value


def _seed(raw: str) -> int:
    value = int(raw)
    if not 0 <= value < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return value


_PARSERS: dict[str, Callable[[str | None], Any]] = {
    "dataset": DatasetKind,
    "variant": Variant,
    "data_dir": Path,
    "runs_dir": Path,
    "run_name": lambda raw: (raw or "").strip(),
    "seed": _optional(_seed),
    "epochs": int,
    "estimator_epochs": _optional(int),
    "batch_size": int,
    "dropout": _parse_bool,
    "n_taus": int,
    "kappa": float,
    "loss_mode": QuantileLossMode,
    "freeze_backbone": _parse_bool,
    "subset": _optional(int),
    "thresholds": _float_tuple,
    "num_taus": int,
    "coverage_points": int,
    "probe_size": int,
    "calibration": Calibration,
    "precision": _precision,
    "norm_mean": _optional(_float_tuple),
    "norm_std": _optional(_float_tuple),
    "lr": float,
    "rho": float,
    "eps": float,
    "gamma": float,
    "progress": _parse_bool,
    "resume": _parse_bool,
}


def load_config(path: str | Path) -> dict[str, str | None]:
    """Raw `key=value` pairs of a config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return dict(dotenv_values(path))


def resolve_config(
    settings: Settings,
    config_path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> CliConfig:
    """Settings defaults, then the config file, then command-line overrides."""
    config = CliConfig(data_dir=settings.data_dir, runs_dir=settings.runs_dir)
    if config_path is not None:
        config = CliConfig.from_mapping(load_config(config_path), config)
    if overrides:
        config = CliConfig.from_mapping({k: v for k, v in overrides.items() if v is not None}, config)
    return config
