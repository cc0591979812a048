"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter combination."""


class ShapeError(ValueError):
    """Array shapes that cannot be reconciled."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class DatasetError(ValueError):
    """Dataset layout violations found during ingestion."""
