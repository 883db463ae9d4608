"""Diffusion text-to-speech with one-shot speaker adaptation through self-supervised speech units."""

from .config import RunConfig, load_config
from .estimator import AdaptedSpeaker, AdaptiveDiffusionTTS, UnitQuantizer
from .exceptions import (CheckpointError, ConfigurationError, ContractViolation, DataError,
                         MissingBaseError, ModelHealthError, UnitAdaptError, UsageError)
from .schedule import NoiseSchedule

__all__ = [
    "AdaptedSpeaker", "AdaptiveDiffusionTTS", "CheckpointError", "ConfigurationError", "ContractViolation",
    "DataError", "MissingBaseError", "ModelHealthError", "NoiseSchedule", "RunConfig", "UnitAdaptError",
    "UnitQuantizer", "UsageError", "load_config",
]
__version__ = "0.1.0"
