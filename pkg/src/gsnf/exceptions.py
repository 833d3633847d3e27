"""Exception hierarchy shared by all gsnf modules."""


class GSNFError(Exception):
    """Base class for errors raised by gsnf."""


class DimensionError(GSNFError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(GSNFError, ArithmeticError):
    """A computation produced NaN/Inf or failed to converge.

    ``component`` names the quantity that went bad (for example ``"L_CE"``).
    """

    def __init__(self, message, component=None, residual=None):
        super().__init__(message)
        self.component = component
        self.residual = residual


class NonConvergenceError(NumericError):
    """An iterative routine hit its iteration cap before reaching tolerance."""


class ContractViolation(GSNFError, ValueError):
    """An input violated a documented precondition (e.g. non row-stochastic A)."""


class ConfigError(GSNFError, ValueError):
    """Invalid configuration value."""


class DatasetError(GSNFError, ValueError):
    """Malformed or invalid dataset record.

    ``line`` is the 1-based line number in the source file when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UndefinedMetricError(GSNFError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""
