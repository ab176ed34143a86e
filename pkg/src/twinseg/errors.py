"""Exception hierarchy shared by all twinseg components."""


class TwinsegError(Exception):
    """Base class for everything raised on purpose by this package."""


class DimensionError(TwinsegError):
    """Shapes or extents do not line up for the requested operation."""


class ConfigError(TwinsegError):
    """A configuration value violates a documented constraint."""


class UsageError(TwinsegError):
    """The API was called in an unsupported way (e.g. backward twice)."""


class DataError(TwinsegError):
    """A data sample is degenerate or otherwise unusable."""


class TrainingError(TwinsegError):
    """Training reached an unrecoverable state (e.g. non-finite loss)."""


class NonFiniteError(TwinsegError):
    """A forward operation produced NaN or Inf values."""
