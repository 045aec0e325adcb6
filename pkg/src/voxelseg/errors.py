"""Exception hierarchy.

Every error raised on purpose derives from :class:`VoxelsegError`; the CLI
maps :class:`ValidationError` subclasses to exit code 1 and everything else
to exit code 2.
"""


class VoxelsegError(Exception):
    """Base class for all package errors."""


class ValidationError(VoxelsegError, ValueError):
    """Input or configuration rejected before any work was done."""


class IoError(VoxelsegError, OSError):
    pass


class CorruptHeader(ValidationError):
    pass


class UnsupportedDatatype(ValidationError):
    pass


class DimensionalityError(ValidationError):
    pass


class MissingSidecar(IoError):
    pass


class ShapeMismatch(ValidationError):
    pass


class WrongIntensityKind(ValidationError):
    pass


class DegenerateRange(ValidationError):
    pass


class CoverageGap(VoxelsegError):
    pass


class IndivisibleShape(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class InvalidK(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class NonFiniteGradient(VoxelsegError, FloatingPointError):
    """Raised when an optimizer step sees NaN/inf gradients (divergence)."""
