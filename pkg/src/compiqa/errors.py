"""Exception types shared across the package."""


class CompiqaError(Exception):
    """Base class for all package errors."""


class DecodeError(CompiqaError):
    """An image file could not be read or decoded."""


class FormatError(CompiqaError):
    """An image has an unsupported layout (e.g. channel count)."""


class ParameterError(CompiqaError):
    """A numeric parameter is outside its valid range."""


class ShapeError(CompiqaError):
    """Array shapes are inconsistent with what an operation requires."""


class NumericError(CompiqaError):
    """A computation produced non-finite values."""


class CheckpointError(CompiqaError):
    """A checkpoint archive is missing, malformed, or shape-incompatible."""


class DataError(CompiqaError):
    """A manifest record is malformed or out of range."""


class ConfigError(CompiqaError):
    """A run configuration is invalid or incomplete."""


class EvaluationError(CompiqaError):
    """An evaluation has no usable records."""
