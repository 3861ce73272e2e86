"""Exception hierarchy shared by every module."""


class VitreforgeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VitreforgeError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class FormatError(VitreforgeError):
    """A file does not follow the expected on-disk format."""


class CorruptionError(FormatError):
    """Archive index and payload disagree (truncation, bad offsets)."""


class UnsupportedDtypeError(FormatError):
    """Archive declares a dtype other than f32."""


class SchemaError(VitreforgeError):
    """A checkpoint lacks keys or has inconsistent shapes."""


class ConfigError(VitreforgeError, ValueError):
    """Invalid model or run configuration."""
