"""Exception types shared across the engine."""


class CftError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(CftError, ValueError):
    """Tensor extents do not line up for the requested operation."""


class InvalidValueError(CftError, ValueError):
    """Input contains values the operation cannot accept (NaN, out of range)."""


class ConfigError(CftError, ValueError):
    """Model configuration violates one of its invariants."""


class ConsistencyError(CftError, ValueError):
    """Two structures that must agree (layout vs. selection, weights vs. config) do not."""


class WeightFormatError(CftError, ValueError):
    """A weight container file is malformed; the message names the offending region."""


class ImageFormatError(CftError, ValueError):
    """An input image file is malformed or has unsupported geometry."""
