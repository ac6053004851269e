"""Physics-guided probabilistic surrogate for underwater transmission loss."""

from .geo import GeoPoint, NormRanges
from .model import ModelConfig, Surrogate, load, predict, predict_arrays, save
from .train import TrainConfig

__all__ = [
    "GeoPoint",
    "NormRanges",
    "ModelConfig",
    "Surrogate",
    "TrainConfig",
    "load",
    "predict",
    "predict_arrays",
    "save",
]
