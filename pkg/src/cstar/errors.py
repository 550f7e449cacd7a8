"""Exception types shared across the package."""


class CstarError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CstarError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(CstarError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class BudgetError(CstarError, ValueError):
    """A compression budget cannot be met under the rank floor."""


class FormatError(CstarError, ValueError):
    """A checkpoint, dataset or config file is malformed."""


class ConfigError(CstarError, ValueError):
    """A run configuration is invalid."""
