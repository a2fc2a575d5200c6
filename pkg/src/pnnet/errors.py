"""Exception hierarchy shared by every pnnet module."""


class PNNetError(Exception):
    """Base class for all errors raised by pnnet."""


class ShapeError(PNNetError, ValueError):
    """A tensor has the wrong rank or extent.

    ``axis`` names the offending axis when one can be singled out.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class NonFiniteError(PNNetError, FloatingPointError):
    pass


class FormatError(PNNetError):
    """A file on disk does not follow the expected layout."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(FormatError):
    pass


class DataError(PNNetError, ValueError):
    pass


class ConfigError(PNNetError, ValueError):
    pass
