"""Hierarchically routed shared/fine-grained experts with shape-adapting hubs, at toy scale."""

from .model import ModelConfig, Prediction, SageUNet, build, metrics, predict
from .rng import Rng
from .tensor import Tensor

__all__ = ["ModelConfig", "Prediction", "Rng", "SageUNet", "Tensor", "build", "metrics", "predict"]
__version__ = "0.1.0"
