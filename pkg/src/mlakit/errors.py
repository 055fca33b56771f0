"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code, see :mod:`mlakit.cli`.
"""


class MlaError(Exception):
    """Base class for every error raised by mlakit."""


class ArgumentError(MlaError, ValueError):
    """An argument is out of range or has the wrong shape."""


class ConfigurationError(MlaError, ValueError):
    """A configuration is internally inconsistent."""


class CheckpointFormatError(MlaError, ValueError):
    """A checkpoint file violates the container format."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericalError(MlaError, ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""


class TrainingDivergedError(NumericalError):
    """Loss became non-finite during optimisation."""

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"loss diverged to {loss} at step {step}")


class CacheStateError(MlaError, RuntimeError):
    """A KV cache is used at a position it was not built for."""
