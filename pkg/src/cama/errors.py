"""Exception types raised across the package."""


class CamaError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(CamaError, ValueError):
    """Array shapes or sizes violate an operation's precondition."""


class LabelError(CamaError, ValueError):
    """A camera-model label is outside the valid range."""


class ImageFormatError(CamaError, ValueError):
    """An image file is not 8-bit RGB."""


class CheckpointError(CamaError):
    """A checkpoint is missing, corrupt or has an incompatible version."""


class ConfigError(CamaError, ValueError):
    """A configuration value is invalid."""


class SplitError(CamaError, ValueError):
    """A dataset split cannot be built as requested."""


class TrainingDiverged(CamaError, RuntimeError):
    """A training loss became NaN or infinite."""
