"""Error types shared across the package.

Every error carries the process exit code the CLI returns for it.
"""
from typing import Optional


class SimRError(Exception):
    """Base class for all package errors."""

    exit_code: int = 1


class ConfigError(SimRError):
    """Invalid configuration or flag combination."""

    exit_code = 2


class DataError(SimRError):
    """Missing, unreadable or inconsistent dataset/checkpoint files."""

    exit_code = 3


class FormatError(DataError):
    """Binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class InputError(DataError):
    """Model input violates its contract (e.g. an all-pad token sequence)."""


class NumericalError(SimRError):
    """Non-finite loss or parameters during training."""

    exit_code = 4


class TensorError(SimRError):
    """Tensor operation contract violation."""

    exit_code = 4


class DimensionError(TensorError):
    """Operand shapes do not conform for an op."""


class DomainError(TensorError):
    """Op evaluated outside its mathematical domain (e.g. log of a non-positive value)."""


class ContractError(TensorError):
    """Caller broke an op precondition that is not about shapes or domains."""


class UndefinedMetricError(SimRError):
    """Metric is undefined for the given labels (reported as absent)."""

    exit_code = 3


class UnavailableError(SimRError):
    """Operation not available for the current model variant."""

    exit_code = 2
