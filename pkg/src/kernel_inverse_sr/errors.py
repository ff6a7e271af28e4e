"""Exception types shared across the package."""


class SRError(Exception):
    """Base class for package errors."""


class ConfigError(SRError, ValueError):
    """Inconsistent shapes, channel counts or configuration values."""


class ParameterError(SRError, ValueError):
    """An argument is outside its valid domain (even kernel size, sigma <= 0, ...)."""


class FormatError(SRError):
    """A gallery, checkpoint or manifest file is malformed.

    ``offset`` is the byte offset (or line number for text files) at which
    parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ArchitectureMismatchError(FormatError):
    """A checkpoint describes a network with a different channel plan."""


class DivergenceError(SRError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class NumericError(SRError, ArithmeticError):
    """Inference produced non-finite values."""
