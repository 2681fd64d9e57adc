"""Exception hierarchy shared by every confidence_iqn module."""


class ConfidenceIqnError(Exception):
    """Base class for all errors raised by confidence_iqn."""


class DimensionError(ConfidenceIqnError, ValueError):
    """Raised when tensor shapes do not agree."""


class ParameterError(ConfidenceIqnError, ValueError):
    """Raised when a scalar parameter is outside its valid range."""


class ContractError(ConfidenceIqnError, RuntimeError):
    """Raised when an API contract is violated by the caller."""


class FormatError(ConfidenceIqnError, ValueError):
    """Raised when a binary file does not follow its documented layout."""

    def __init__(self, message: str, *, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncatedFileError(FormatError):
    """Raised when a file ends before its header says it should."""


class CheckpointError(FormatError):
    """Raised when a checkpoint container is malformed."""


class DivergenceError(ConfidenceIqnError, RuntimeError):
    """Raised when a training loss becomes non-finite."""


class ConfigError(ConfidenceIqnError, ValueError):
    """Raised for unknown or invalid configuration keys."""


class MissingArtifactError(ConfidenceIqnError, FileNotFoundError):
    """Raised when a dataset file or checkpoint is missing.

    The message always carries a remediation hint.
    """

    def __init__(self, path, hint: str):
        super().__init__(f"{path} not found: {hint}")
        self.path = path
        self.hint = hint
