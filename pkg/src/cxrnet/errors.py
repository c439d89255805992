"""Exception types shared across the package."""


class CxrError(Exception):
    """Base class for errors raised by cxrnet."""


class ShapeError(CxrError, ValueError):
    """Tensor dimensions do not line up."""


class StateError(CxrError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class ConfigError(CxrError, ValueError):
    """Invalid configuration or argument values."""


class NumericalError(CxrError, FloatingPointError):
    """A non-finite value appeared where a finite one was required."""


class CorruptFileError(CxrError, ValueError):
    """A weight file failed structural or checksum validation."""


class CompletenessError(CxrError, KeyError):
    """A strict weight load found parameters missing from the file."""

    def __str__(self):
        return Exception.__str__(self)


class DecodeError(CxrError, OSError):
    """An image file could not be decoded."""


class UndefinedMetricError(CxrError, ZeroDivisionError):
    """A metric's denominator is zero for the requested class."""
