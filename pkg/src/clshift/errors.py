"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class ShapeError(ValueError):
    """Array dimensions or parameter layouts do not line up."""


class NumericError(ArithmeticError):
    """NaN or otherwise non-finite input where a finite value is required."""


class IntegrityError(Exception):
    """Persisted data failed a checksum, hash, or consistency check."""
