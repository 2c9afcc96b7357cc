"""Exception hierarchy shared by every subpackage."""


class IVVAEError(Exception):
    """Base class for all library errors."""


class ShapeError(IVVAEError, ValueError):
    pass


class InvalidFrameCountError(IVVAEError, ValueError):
    """Frame count is not 1 (mod t_c); the caller must pad or trim the clip."""


class InvalidGroupingError(IVVAEError, ValueError):
    pass


class InvalidKernelError(IVVAEError, ValueError):
    pass


class InvalidInputError(IVVAEError, ValueError):
    pass


class ConfigurationError(IVVAEError, ValueError):
    pass


class IncompatibleCheckpointError(IVVAEError, ValueError):
    pass


class StaleCacheError(IVVAEError, RuntimeError):
    pass


class UndefinedMetricError(IVVAEError, ValueError):
    pass


class DataError(IVVAEError, RuntimeError):
    """Malformed file or exhausted data source."""
