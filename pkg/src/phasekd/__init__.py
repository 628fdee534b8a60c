"""Two-stage self-knowledge-distillation toolkit for online phase recognition.

Stage one trains a per-frame encoder against an EMA teacher; stage two trains a
causal temporal decoder (GRU or TCN) against its own best past epoch with a
truncated-MSE smoothing term.
"""
from .errors import (ConfigError, DomainError, FormatError, LabelError, ParameterError, PhaseKDError,
                     SequenceLengthError, ShapeError, StructureError)
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "FormatError", "LabelError", "ParameterError", "PhaseKDError",
    "SequenceLengthError", "ShapeError", "StructureError", "Tensor", "backward", "no_grad", "__version__",
]
