"""Timestamp-guided target sound extraction: synthesis, training and scoring."""

from .config import ExperimentConfig, load_config
from .errors import TargetSoundError

__all__ = ["ExperimentConfig", "TargetSoundError", "load_config"]
__version__ = "0.1.0"
