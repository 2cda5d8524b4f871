"""Appearance, shape and gait fusion for cloth-changing video person re-identification
from 3D skeleton sequences, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .errors import (ASGLError, CheckpointFileError, ConfigError, DataError, DimensionError,  # noqa: E402
                     EvaluationError, IngestError, NumericError, SamplerError)
from .model import ASGLModel, ModelConfig  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = [
    "ASGLError", "CheckpointFileError", "ConfigError", "DataError", "DimensionError", "EvaluationError",
    "IngestError", "NumericError", "SamplerError", "ASGLModel", "ModelConfig", "TrainConfig", "train",
]
