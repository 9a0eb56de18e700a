"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed or contract-violating input data."""


class ShapeError(ValueError):
    """Tensor shape mismatch."""


class TrainingError(RuntimeError):
    """Non-finite or otherwise unusable state during optimization."""
