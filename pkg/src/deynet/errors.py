"""Exception hierarchy shared across the package."""


class DeyNetError(Exception):
    """Base class for all package errors."""


class ParameterError(DeyNetError, ValueError):
    """An argument or config value is out of its allowed range."""


class FormatError(DeyNetError):
    """A file on disk does not follow the expected container format."""


class ShapeError(DeyNetError, ValueError):
    """Array or parameter shapes are incompatible."""


class DataError(DeyNetError, ValueError):
    """Input data violates a content contract (missing labels, non-binary masks, empty sets)."""


class ConsistencyError(DeyNetError):
    """An internal record (e.g. a mask plan) does not match the data it is applied to."""


class TrainingError(DeyNetError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class AdaptationError(DeyNetError):
    """Test-time adaptation produced a non-finite gradient."""
