"""Exception hierarchy. Each class maps to a CLI exit code."""


class GSPSError(Exception):
    exit_code = 1


class ParameterError(GSPSError, ValueError):
    """Invalid argument or precondition breach."""

    exit_code = 1


class DataError(GSPSError):
    """Unreadable, missing or inconsistent input data."""

    exit_code = 2


class FormatError(DataError):
    pass


class NumericError(GSPSError, ArithmeticError):
    """Non-finite value encountered during optimization."""

    exit_code = 3
