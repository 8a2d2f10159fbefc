"""Exceptions shared across modules."""


class ConfigError(ValueError):
    """Invalid or missing configuration (bad key, range, or empty source)."""


class NumericError(ArithmeticError):
    """Non-finite value encountered where finiteness is required."""


class ShapeError(ValueError):
    """Tensor arguments with incompatible shapes."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class SetupError(RuntimeError):
    """Episode preconditions violated (blocked or unreachable start/goal)."""
