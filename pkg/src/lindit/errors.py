"""Exception hierarchy shared by every subpackage.

The harness maps these onto process exit codes: configuration and usage
problems exit 2, bad input data exits 3, numeric divergence exits 4.
"""

from __future__ import annotations


class LinDiTError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(LinDiTError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""


class GeometryError(ConfigError):
    """Latent geometry or token grid does not divide evenly."""


class DomainError(ConfigError):
    """A scalar argument lies outside the operation's domain."""


class ScheduleError(ConfigError):
    """A time grid or noise schedule cannot be used by a solver."""


class TemplateError(ConfigError):
    pass


class ConditioningError(ConfigError):
    pass


class DataError(LinDiTError, ValueError):
    exit_code = 3


class QuantizationError(DataError):
    pass


class NumericError(LinDiTError, ArithmeticError):
    """A computation produced NaN or infinity."""

    exit_code = 4


class EvaluationError(NumericError):
    pass


class DivergenceError(NumericError):
    """An iterative procedure (sampler, training loop) left the finite range."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TapeError(LinDiTError, RuntimeError):
    pass
