"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`StmError`; the CLI maps the subclasses to exit-code categories.
"""


class StmError(Exception):
    """Base class for package errors."""

    exit_code = 1


class InvalidParameterError(StmError, ValueError):
    """A physical or numerical parameter is non-finite or out of range."""

    exit_code = 2


class ConfigError(StmError, ValueError):
    """Configuration file could not be parsed or failed validation."""

    exit_code = 2


class ScheduleError(InvalidParameterError):
    """The pulse schedule cannot realise the requested sampling."""


class ShapeError(StmError, ValueError):
    """Series have incompatible lengths or sampling grids."""

    exit_code = 3


class NumericalError(StmError, ArithmeticError):
    exit_code = 3


class StepSizeError(NumericalError):
    """Integration step exceeds the stability/accuracy bound."""


class NumericalInstabilityError(NumericalError):
    """A density-matrix invariant broke during integration.

    ``step`` is the index of the first offending step.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class DivisionGuardError(NumericalError):
    """A quantity would be divided by zero (probe off, zero noise power)."""
