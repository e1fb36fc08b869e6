"""Exception types; each maps to a CLI exit code."""


class AdvKwsError(Exception):
    exit_code = 1


class ConfigError(AdvKwsError, ValueError):
    exit_code = 2


class DataError(AdvKwsError, ValueError):
    """Malformed corpus, checkpoint, or input data."""

    exit_code = 3


class NumericalError(AdvKwsError, ArithmeticError):
    exit_code = 4
