"""Convolutional smile recognition from scratch in numpy."""

from .errors import SmileNetError
from .estimator import MouthCropper, SmileNetClassifier
from .network import ArchitectureConfig, Network, build
from .train import TrainConfig, train

__all__ = [
    "ArchitectureConfig",
    "MouthCropper",
    "Network",
    "SmileNetClassifier",
    "SmileNetError",
    "TrainConfig",
    "build",
    "train",
]

__version__ = "0.1.0"
