"""Adversarial autoencoder anomaly detection and localization for machine audio."""

from .detection import SCORE_NAMES, DetectionConfig
from .frontend import FrontendConfig
from .model import ModelConfig
from .training import TrainConfig

__version__ = "0.1.0"
__all__ = ["SCORE_NAMES", "DetectionConfig", "FrontendConfig", "ModelConfig", "TrainConfig", "__version__"]
