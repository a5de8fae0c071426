"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes (config 2, data 3, numeric 4).
"""


class ConfigError(ValueError):
    """Invalid configuration: bad field values, incompatible settings."""


class ShapeError(ConfigError):
    """Tensor shapes incompatible with the requested operation."""


class DataError(ValueError):
    """Unreadable, malformed, or out-of-contract input data."""


class NumericError(ArithmeticError):
    """Numeric failure: division by zero, non-finite loss, etc."""
