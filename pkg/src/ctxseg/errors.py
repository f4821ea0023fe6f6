"""Exception hierarchy. Each class maps to a distinct CLI exit code."""


class CtxSegError(Exception):
    exit_code = 1


class ConfigurationError(CtxSegError, ValueError):
    exit_code = 4


class DimensionError(CtxSegError, ValueError):
    exit_code = 5


class DataError(CtxSegError, ValueError):
    exit_code = 6


class NumericError(CtxSegError, ArithmeticError):
    exit_code = 7


class UsageError(CtxSegError, RuntimeError):
    exit_code = 8
