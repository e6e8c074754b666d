"""Exception hierarchy shared by every layer of the package."""


class MoEIError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ShapeError(MoEIError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MoEIError, RuntimeError):
    """A documented precondition was violated."""


class ConfigError(MoEIError, ValueError):
    """A configuration value is unknown or out of range."""


class NumericError(MoEIError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""

    exit_code = 3


class CorruptionError(MoEIError, IOError):
    """A checkpoint failed its integrity check."""


class UnsupportedVersionError(MoEIError, IOError):
    """A checkpoint was written with a format version this build cannot read."""
