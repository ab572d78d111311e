"""Exception types shared across the package."""


class ZfloraError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ZfloraError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ZfloraError, ValueError):
    """A model/adapter/run configuration violates its invariants."""


class InputError(ZfloraError, ValueError):
    """Runtime input (token ids, sample values) is out of range."""


class CapacityError(ZfloraError, RuntimeError):
    """A KV cache or buffer would overflow its capacity."""


class NumericError(ZfloraError, FloatingPointError):
    """Non-finite values reached an operation that requires finite input."""


class TrainingError(ZfloraError, RuntimeError):
    """Training diverged; carries the step index where loss became non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class BenchEnvironmentError(ZfloraError, RuntimeError):
    """The host cannot provide what the benchmark protocol requires."""


class ContainerError(ZfloraError, ValueError):
    """A checkpoint container is malformed or violates its format invariants."""
