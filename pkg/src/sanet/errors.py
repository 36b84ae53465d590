"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Shapes, extents or settings that cannot work together."""


class FormatError(ValueError):
    """A file on disk does not match its declared format."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVariantError(FormatError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class UninitializedStatisticsError(RuntimeError):
    """Batch normalization evaluated before any running statistics exist."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
