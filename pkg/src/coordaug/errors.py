"""Exception hierarchy shared by all modules."""


class CoordAugError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CoordAugError, ValueError):
    """Input violates a documented precondition.

    ``ids`` carries offending identifiers (annotation ids, image ids) when
    the check is about specific records.
    """

    def __init__(self, message, ids=None):
        super().__init__(message)
        self.ids = list(ids) if ids else []


class DatasetParseError(CoordAugError):
    def __init__(self, message, byte_offset):
        super().__init__(f"{message} (at byte offset {byte_offset})")
        self.byte_offset = byte_offset


class ConsistencyError(CoordAugError):
    """Plans and samples disagree (e.g. a plan names an unknown annotation)."""


class DegenerateMaskError(ValidationError):
    """Region mask is all ones or all zeros."""


class NumericError(CoordAugError, ArithmeticError):
    def __init__(self, message, timestep=None):
        super().__init__(message)
        self.timestep = timestep


class BackendError(CoordAugError):
    """A model backend (embedder, denoiser, codec, classifier) failed."""

    def __init__(self, message, *, backend=None, detail=None):
        super().__init__(message)
        self.backend = backend
        self.detail = detail


class ConfigError(CoordAugError, ValueError):
    """Pipeline configuration does not match the schema."""
