"""Phrase grounding on synthetic scenes, end to end.

A small CNN produces stride-16 visual features; a bidirectional GRU
encoder-decoder embeds the phrase; per-timestep spatial attention ties the
two together; the time-averaged attention context feeds both a region
proposal network and a relatedness detector. Everything runs on a minimal
tape-based autodiff engine over numpy arrays.
"""

from .config import ModelConfig, preset_config
from .errors import (CodecError, ConfigError, ContractError, GenerationError,
                     GroundnetError, NumericError, ParseError, ShapeError)
from .geometry import Box, ScoredBox
from .model import GroundingModel, build_model, run_inference, total_loss
from .tensor import Tensor, Tape, backward, recording

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CodecError",
    "ConfigError",
    "ContractError",
    "GenerationError",
    "GroundingModel",
    "GroundnetError",
    "ModelConfig",
    "NumericError",
    "ParseError",
    "ScoredBox",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "build_model",
    "preset_config",
    "recording",
    "run_inference",
    "total_loss",
    "__version__",
]
