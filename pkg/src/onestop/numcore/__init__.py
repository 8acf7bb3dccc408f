from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    EmptyMaskError,
    cross_entropy,
    dropout,
    embedding,
    layer_norm,
    log_softmax,
    relu,
    softmax,
)
from .optim import OptimizerState, adam_step, clip_grad_norm
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    get_default_dtype,
    is_grad_enabled,
    matmul,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "EmptyMaskError",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "adam_step",
    "clip_grad_norm",
    "concat",
    "cross_entropy",
    "dropout",
    "embedding",
    "get_default_dtype",
    "is_grad_enabled",
    "layer_norm",
    "load_checkpoint",
    "log_softmax",
    "matmul",
    "no_grad",
    "precision",
    "relu",
    "save_checkpoint",
    "set_default_dtype",
    "softmax",
]
