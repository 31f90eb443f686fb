"""Hidden path selection networks at desk scale."""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    HpsError,
    IoError,
    ShapeError,
    TrainingError,
)
from .tensor import Tape, Tensor, detach, forward_record

__version__ = "0.1.0"
