"""Exception types shared across the package."""


class GenspecError(Exception):
    """Base class for package errors."""


class ShapeError(GenspecError):
    """Operands have incompatible shapes; the message names both."""


class FormatError(GenspecError):
    """A binary file failed validation; the message carries a byte offset."""


class ConfigError(GenspecError):
    """A config file or CLI flag set is malformed or inconsistent."""


class NumericalError(GenspecError):
    """Training hit a non-finite loss; carries the last good state if any."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial
