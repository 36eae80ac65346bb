"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values it cannot handle."""


class ConfigError(ValueError):
    """A configuration value is inconsistent or out of range."""


class ValidationError(ValueError):
    """Input data failed validation."""


class EmptyBatchError(ValueError):
    """A batch operation received zero sequences."""
