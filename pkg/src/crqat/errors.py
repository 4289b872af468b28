"""Exception types shared across the package."""


class CrqatError(Exception):
    """Base class for all package errors."""


class ShapeError(CrqatError, ValueError):
    """Tensor or array dimensions are incompatible with an operation."""


class ConfigError(CrqatError, ValueError):
    """A configuration value or file is invalid."""


class QuantSpecError(CrqatError, ValueError):
    """Quantizer parameters violate their invariants."""


class CalibrationError(CrqatError, RuntimeError):
    """Calibration requested on an observer or model not ready for it."""


class StateError(CrqatError, RuntimeError):
    """An operation was called on an object in the wrong lifecycle state."""


class UsageError(CrqatError, ValueError):
    """An API was called with arguments outside its contract."""


class NonFiniteError(CrqatError, ArithmeticError):
    """A NaN or Inf appeared in a forward or backward computation."""


class TrainingDiverged(CrqatError, RuntimeError):
    """Training produced a non-finite loss; carries the offending step record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class CheckpointError(CrqatError, OSError):
    """Checkpoint files are missing, inconsistent, or corrupt."""


class ChecksumError(CheckpointError):
    """Checkpoint blob does not match the checksum in its manifest."""


class DataFormatError(CrqatError, OSError):
    """A dataset file is missing, truncated, or malformed."""
