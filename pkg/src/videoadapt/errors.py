"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """A numeric precondition was violated (NaN inputs, NaN gradients)."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class DataError(ValueError):
    """Input data violates a documented precondition (bad label, non-finite values)."""


class UsageError(RuntimeError):
    """The caller invoked an operation in an unsupported mode."""


class FormatError(ValueError):
    """Base class for feature-file format violations."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
