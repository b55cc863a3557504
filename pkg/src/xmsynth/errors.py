"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 usage/validation, 2 data/I-O, 3 numeric failure.
"""


class XmsError(Exception):
    exit_code = 1


class ValidationError(XmsError, ValueError):
    exit_code = 1


class DimensionError(ValidationError):
    """Operand shapes are incompatible."""


class DegenerateStatisticsError(ValidationError):
    """Batch statistics requested over a single value per channel."""


class DetachedTapeError(XmsError, RuntimeError):
    """Backward requested on a tensor whose tape is closed or absent."""


class DataError(XmsError, OSError):
    exit_code = 2


class CheckpointFormatError(DataError):
    pass


class IntegrityError(DataError):
    pass


class KindMismatchError(DataError):
    pass


class NumericError(XmsError, ArithmeticError):
    exit_code = 3


class TrainingDivergedError(NumericError):
    """A loss went non-finite; ``bundle`` holds the last finite state."""

    def __init__(self, message, bundle=None, batch_indices=None, history=None):
        super().__init__(message)
        self.bundle = bundle
        self.batch_indices = batch_indices
        self.history = history
