"""Exception hierarchy shared by the library and the command line tool."""


class MF2AError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MF2AError, ValueError):
    """Invalid configuration or hyperparameter values."""

    exit_code = 2


class DataError(MF2AError, ValueError):
    """Malformed, missing or mutated input data."""

    exit_code = 3


class DomainError(MF2AError, ValueError):
    """Argument outside the domain of a density or sampler."""

    exit_code = 3


class NumericalError(MF2AError, ArithmeticError):
    """A numerical routine failed (e.g. Cholesky after the full jitter ladder)."""

    exit_code = 4

    def __init__(self, message, **context):
        self.context = dict(context)
        if self.context:
            extra = ", ".join(f"{k}={v}" for k, v in self.context.items())
            message = f"{message} ({extra})"
        super().__init__(message)


class PostprocessError(DataError):
    """Post-processing left too few draws; carries the attrition report."""

    def __init__(self, message, report=None):
        self.report = report
        if report is not None:
            message = f"{message}; attrition: {report}"
        super().__init__(message)
