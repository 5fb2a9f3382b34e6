"""Streaming, strictly causal x4 video super-resolution built around a
deformable attention pyramid recurrent cell, with verified gradients,
degradation/metrics tooling, complexity analysis and offset analytics."""

from . import analysis, cell, dap, degrade, encoder, frames, metrics, tensor, trainer
from .cell import HiddenState, ModelConfig, ModelWeights, preset, run_sequence, step
from .errors import NumericError, ShapeError, StateError, WeightsFormatError
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "analysis", "cell", "dap", "degrade", "encoder", "frames", "metrics",
    "tensor", "trainer", "Tensor", "HiddenState", "ModelConfig", "ModelWeights",
    "preset", "run_sequence", "step", "NumericError", "ShapeError", "StateError",
    "WeightsFormatError", "__version__",
]
