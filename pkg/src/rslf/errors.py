"""Exception hierarchy shared by all rslf modules.

Exit-code mapping used by the CLI: ArgumentError -> 2, DataError -> 3,
NumericalError -> 4.
"""

from __future__ import annotations


class RslfError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(RslfError, ValueError):
    """A caller-supplied argument violates a documented precondition."""


class BoundsError(ArgumentError, IndexError):
    """An index is outside its valid range; the message names the axis."""


class BehindCameraError(ArgumentError):
    """A disparity/depth maps to a point at or behind the camera plane."""

    def __init__(self, message: str, disparity: float | None = None):
        super().__init__(message)
        self.disparity = disparity


class DataError(RslfError):
    """On-disk data is missing, malformed, or inconsistent."""


class ParseError(DataError):
    """A file could not be decoded as its declared format."""


class CorruptionError(DataError):
    """Content hash verification failed."""


class VersionError(DataError):
    """A container declares a schema version this build does not support."""


class NumericalError(RslfError):
    """Optimization produced a non-finite or diverging state."""


class InternalConsistencyError(RslfError):
    """A forward cache and a backward call do not belong together."""
