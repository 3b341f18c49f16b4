"""Exception hierarchy.

Every failure the package raises on purpose derives from ``AlignRecError`` so
callers (and the CLI exit-code mapping) can tell expected failures apart from
bugs.
"""


class AlignRecError(Exception):
    """Base class for all package errors."""


class DimensionError(AlignRecError, ValueError):
    """Operand shapes do not agree."""


class ZeroNormError(AlignRecError, ValueError):
    """A vector with zero norm was passed where a direction is required."""


class ConfigError(AlignRecError, ValueError):
    """Invalid or unknown configuration key/value."""


class FrozenParameterError(AlignRecError, RuntimeError):
    """Attempted to mutate parameters that have been frozen."""


class NonFiniteError(AlignRecError, FloatingPointError):
    """A loss or gradient became NaN/inf."""


class ValidationError(AlignRecError, ValueError):
    """Malformed input data. ``locator`` names the offending line or record."""

    def __init__(self, message, locator=None):
        self.locator = locator
        if locator is not None:
            message = f"{message} (at {locator})"
        super().__init__(message)


class DanglingIdError(ValidationError):
    pass


class DimMismatchError(ValidationError):
    pass


class TimestampOrderError(ValidationError):
    pass


class CheckpointError(AlignRecError, IOError):
    """Checkpoint could not be read: bad magic, version or checksum."""


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class NotTrainedError(AlignRecError, RuntimeError):
    pass
