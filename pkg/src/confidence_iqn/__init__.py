"""Loss-distribution estimation with implicit quantile networks for selective prediction."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CheckpointError,
    ConfidenceIqnError,
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    FormatError,
    MissingArtifactError,
    ParameterError,
    TruncatedFileError,
)
from .tensor_core import Parameter, Rng, Tensor  # noqa: E402

__all__ = [
    "__version__",
    "CheckpointError",
    "ConfidenceIqnError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "MissingArtifactError",
    "ParameterError",
    "TruncatedFileError",
    "Parameter",
    "Rng",
    "Tensor",
]
