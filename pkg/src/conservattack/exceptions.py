"""Exception hierarchy shared by the library and the command-line front end."""


class ConservAttackError(Exception):
    """Base class for all package errors."""

    exit_code = 5


class ConfigError(ConservAttackError, ValueError):
    """Invalid configuration (bad key, out-of-range value, inconsistent options)."""

    exit_code = 2


class DataError(ConservAttackError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NumericError(ConservAttackError, ArithmeticError):
    """Non-finite values, divergence, or a numerical invariant breach."""

    exit_code = 4


class ModelFormatError(DataError):
    """A model file is malformed, truncated, or does not match the expected architecture."""
