from .functional import (
    activation,
    bce_from_logits,
    conv2d,
    conv2d_transpose,
    instance_norm,
    l1_loss,
    leaky_relu,
    relu,
    sigmoid,
    softmax_cross_entropy,
    tanh,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamState, adam_step, collect_grads
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    concat,
    get_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "AdamState",
    "GradCheckReport",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "activation",
    "adam_step",
    "as_tensor",
    "bce_from_logits",
    "collect_grads",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "get_dtype",
    "grad_check",
    "grad_enabled",
    "instance_norm",
    "l1_loss",
    "leaky_relu",
    "no_grad",
    "precision",
    "relu",
    "set_precision",
    "sigmoid",
    "softmax_cross_entropy",
    "tanh",
]
