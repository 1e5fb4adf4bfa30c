"""Exception hierarchy shared by every module."""


class TacnnError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(TacnnError, ValueError):
    pass


class ShapeError(TacnnError, ValueError):
    pass


class InputError(TacnnError, ValueError):
    pass


class UsageError(TacnnError, RuntimeError):
    pass


class NumericError(TacnnError, ArithmeticError):
    pass


class FormatError(TacnnError, ValueError):
    pass


class ParseError(FormatError):
    """Malformed text input; carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
