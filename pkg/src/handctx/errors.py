"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class ConstraintError(ValueError):
    """A parameter violates its feasibility constraint."""


class ConfigError(ValueError):
    """Invalid configuration value (stride, padding, lambda, ...)."""


class UsageError(ValueError):
    """An API was called with arguments outside its contract."""


class DegenerateError(ValueError):
    """Geometry is degenerate (zero-length direction, zero radius, ...)."""


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given input (e.g. AP with zero ground truths)."""
