from . import tensor as F
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .gradcheck import analytic_gradient, finite_difference_gradient, max_relative_error
from .nn import Embedding, Linear, Module
from .optim import Adam, AdamState, adam_step
from .rng import stream
from .tensor import Tensor, default_dtype, no_grad

__all__ = [
    "F", "Tensor", "default_dtype", "no_grad", "Module", "Linear", "Embedding",
    "Adam", "AdamState", "adam_step", "finite_difference_gradient", "analytic_gradient",
    "max_relative_error", "stream", "save_checkpoint", "load_checkpoint",
]
