"""Hybrid CNN / MobileViT image classifier with an adaptive attention gate,
built on a small numpy autodiff stack (numba-accelerated kernels)."""
from .kernels import BACKEND
from .model import ForwardOutput, Model, ModelConfig, build_model, count_params, forward
from .tensor import NonFiniteError, ShapeError, Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ForwardOutput",
    "Model",
    "ModelConfig",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "build_model",
    "count_params",
    "forward",
]
