"""
Exception hierarchy shared by every engine module.
"""


class SparseFlashError(Exception):
    """Base class for all errors raised by the engine."""


class RejectedInputError(SparseFlashError, ValueError):
    """An operation was called with inputs that violate its contract."""


class NonFiniteLossError(SparseFlashError, ArithmeticError):
    """Training produced a NaN or infinite loss."""


class CheckpointError(SparseFlashError):
    """A checkpoint container could not be read or written."""
