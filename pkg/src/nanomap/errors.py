"""Exception types shared across the package."""

from __future__ import annotations


class NanoMapError(Exception):
    """Base class for every error raised by this package."""


class OutOfRangeError(NanoMapError, ValueError):
    """A timestamp lies outside the interval that can be interpolated."""


class MonotonicityError(NanoMapError, ValueError):
    """A time-ordered stream received an out-of-order element."""


class NoDataError(NanoMapError, LookupError):
    """A query was issued against an empty structure."""


class DegenerateProjectionError(NanoMapError, ValueError):
    """A point with zero depth cannot be projected into the image."""


class LogFormatError(NanoMapError, ValueError):
    """A log file line could not be parsed."""

    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        self.message = message
        super().__init__(f"{self.path}:{lineno}: {message}")
