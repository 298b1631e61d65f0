"""Exception types raised across the package."""


class ReconError(Exception):
    """Base class for all package errors."""


class DimensionError(ReconError, ValueError):
    """Array shapes are inconsistent."""


class ConfigError(ReconError, ValueError):
    """A configuration or argument value is invalid."""


class ContractError(ReconError, AssertionError):
    """A documented precondition was violated (debug checks only)."""


class InvalidStateError(ReconError, ValueError):
    """Algorithm state is outside its valid domain."""


class InsufficientDataError(ReconError, ValueError):
    """Too few samples to compute a statistic."""


class UndefinedMetricError(ReconError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero reference)."""


class NumericInstabilityError(ReconError, ArithmeticError):
    """A numerical routine produced an unusable result."""


class NonFiniteError(ReconError, FloatingPointError):
    """Training produced NaN/Inf; ``diagnostics_path`` points at the dump."""

    def __init__(self, message, diagnostics_path=None):
        super().__init__(message)
        self.diagnostics_path = diagnostics_path


class ResumeMismatchError(ReconError, RuntimeError):
    """Checkpoint was written with a different configuration."""


class PersistError(ReconError, OSError):
    """Writing an output file failed; partial output was removed."""


class SplitNotFoundError(ReconError, KeyError):
    """Requested dataset split does not exist."""
