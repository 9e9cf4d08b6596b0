"""Small reverse-mode autodiff engine on numpy arrays."""

from . import functional
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .nn import Conv2d, Module, Parameter
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, get_dtype, precision, set_dtype

__all__ = [
    "Adam", "AdamState", "Conv2d", "Module", "Parameter", "Tensor", "adam_step", "as_tensor",
    "functional", "get_dtype", "load_checkpoint", "precision", "save_checkpoint", "set_dtype",
]
