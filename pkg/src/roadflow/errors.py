"""Exception hierarchy shared across the package."""


class RoadflowError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(RoadflowError):
    """Bad configuration value or inconsistent settings."""


class DataError(RoadflowError):
    """Malformed or contract-violating input data."""


class ShapeError(RoadflowError):
    """Array shape mismatch in a numeric operation."""


class NumericError(RoadflowError):
    """Numeric failure (divergence, non-convergence, NaN)."""
