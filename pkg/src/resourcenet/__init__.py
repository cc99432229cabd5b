"""Sequence-to-sequence prediction of co-located job resource traces."""

from .features import METRICS, DataError, Normalizer
from .model import GenerationConfig, ModelConfig, ResourceNet, train
from .numerics import NumericError, StateError

__all__ = [
    "METRICS",
    "DataError",
    "GenerationConfig",
    "ModelConfig",
    "Normalizer",
    "NumericError",
    "ResourceNet",
    "StateError",
    "train",
]
__version__ = "0.1.0"
