"""Float64 reverse-mode autodiff on numpy arrays."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import ParamCheck, check_function, grad_check, gradient_error
from .ops import bilinear_sample, softmax
from .optim import Adam, AdamState, adam_step
from .params import ParameterStore, ParamScope
from .tensor import NonFiniteError, Tape, Tensor, active_tape, backward, no_grad

__all__ = [
    "Adam", "AdamState", "NonFiniteError", "ParamCheck", "ParamScope", "ParameterStore",
    "Tape", "Tensor", "active_tape", "adam_step", "backward", "bilinear_sample",
    "check_function", "grad_check", "gradient_error", "load_checkpoint", "ops",
    "save_checkpoint", "softmax", "no_grad",
]
