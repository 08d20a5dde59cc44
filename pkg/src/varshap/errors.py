class VarshapError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(VarshapError, ValueError):
    pass


class NumericError(VarshapError, ArithmeticError):
    """A non-finite value appeared; the message names the operation."""


class UsageError(VarshapError, RuntimeError):
    pass


class ConfigurationError(VarshapError, ValueError):
    pass


class SolverError(VarshapError, RuntimeError):
    pass


class ParseError(VarshapError, ValueError):
    pass
