"""Exception types shared across the package."""


class FeatlockError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FeatlockError, ValueError):
    """A tensor, permutation, or block size has an incompatible dimension."""


class AnnotationError(FeatlockError, ValueError):
    """A VOC-style annotation file is malformed or incomplete."""


class ConfigError(FeatlockError, ValueError):
    """An experiment or model configuration failed validation."""


class TrainingDivergedError(FeatlockError, RuntimeError):
    """Training produced a non-finite loss."""
