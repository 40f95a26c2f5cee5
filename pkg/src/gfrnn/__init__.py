"""Recurrent sequence models with per-layer-pair global gates.

Library layout: numerics (RNG, dense kernels), cells (tanh/GRU/LSTM),
stack (architectures, BPTT), training (optimizers, schedules), charlm
(byte/character language modeling), progeval (program synthesis task and
encoder-decoder), checkpoint (binary round trips), cli (command surface).
"""

from .errors import (CheckpointError, ConfigError, DataError, GenerationError,
                     GfrnnError, NumericError, ParseError)
from .numerics import Rng
from .stack import Model, ModelConfig, ParamSet, count_parameters

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "GenerationError",
    "GfrnnError", "NumericError", "ParseError", "Rng",
    "Model", "ModelConfig", "ParamSet", "count_parameters", "__version__",
]
