"""Exception hierarchy shared by all modules."""


class ConvSCCSError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(ConvSCCSError, ValueError):
    """Invalid configuration value or missing configuration key."""


class ParseError(ConvSCCSError, ValueError):
    """Malformed input record."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ConvSCCSError, ValueError):
    """Input data violates the case-series structure."""


class GapViolationError(ValidationError):
    """Two exposure starts to the same drug are closer than the risk window."""


class DomainError(ConvSCCSError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class DimensionError(ConvSCCSError, ValueError):
    """Array shapes do not match."""


class DivergenceError(ConvSCCSError, ArithmeticError):
    """The optimizer produced a non-finite objective."""
