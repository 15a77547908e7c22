"""Exception hierarchy shared by the library and the command line."""


class BPTFError(Exception):
    """Base class for all errors raised by this package."""


class DataError(BPTFError, ValueError):
    """Malformed input data, inconsistent dimensions or invalid arguments."""


class TensorFormatError(DataError):
    """A tensor or sidecar file failed to parse.

    ``line`` is the 1-based line number of the offending line, if known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(BPTFError, ArithmeticError):
    """Internal numerical failure (non-finite values, non-positive rates)."""
