"""Cross-modality MR slice synthesis (T1 to T2) on a numpy autodiff engine."""

from .errors import (
    CheckpointFormatError,
    DataError,
    DegenerateStatisticsError,
    DetachedTapeError,
    DimensionError,
    IntegrityError,
    KindMismatchError,
    NumericError,
    TrainingDivergedError,
    ValidationError,
    XmsError,
)
from .tensor import Rng, Tape, Tensor, no_grad, precision

__version__ = "0.1.0"
