"""Shared exception types for the gridcast package."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DataError(ValueError):
    """Input files or dataset contents are invalid."""


class ConfigError(ValueError):
    """A configuration value or configuration file is invalid."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or ran in an invalid state."""


class UsageError(Exception):
    """Command line invocation is malformed."""
