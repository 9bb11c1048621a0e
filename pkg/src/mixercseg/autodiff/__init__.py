"""Dense tensor engine with reverse-mode automatic differentiation."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .decisions import decide, record_decisions
from .gradcheck import check_gradients, max_rel_err
from .nn import Conv2d, Identity, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor, no_grad

__all__ = [
    "Conv2d",
    "Identity",
    "LayerNorm",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "check_gradients",
    "decide",
    "load_checkpoint",
    "max_rel_err",
    "no_grad",
    "ops",
    "record_decisions",
    "save_checkpoint",
]
