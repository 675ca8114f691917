"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericError -> 4.
"""


class GcmkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(GcmkitError, ValueError):
    """An operation received tensors whose shapes do not compose."""


class NumericError(GcmkitError, ArithmeticError):
    """Non-finite values where finite ones are required (overflow, divergence)."""


class TapeError(GcmkitError, ValueError):
    """Contract violation on a computation tape (e.g. loss node not on the tape)."""


class CheckpointError(GcmkitError, IOError):
    """Checkpoint file is corrupt, truncated, or fails its checksum."""


class DataFormatError(GcmkitError, ValueError):
    """A dataset file violates its binary format. `offset` is the byte offset
    at which the problem was detected, when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(GcmkitError, ValueError):
    """Invalid experiment configuration or argument."""
