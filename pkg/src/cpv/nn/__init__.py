from .autodiff import (
    Tensor,
    add,
    add_const,
    concat,
    conv2d,
    flatten,
    gather_rows,
    l2_rows,
    linear,
    mean,
    parameter,
    relu,
    rows,
    scale,
    softmax_cross_entropy,
    sub,
    trace_relu_signs,
)
from .gradcheck import grad_check
from .optim import Adam

__all__ = [
    "Tensor",
    "add",
    "add_const",
    "concat",
    "conv2d",
    "flatten",
    "gather_rows",
    "l2_rows",
    "linear",
    "mean",
    "parameter",
    "relu",
    "rows",
    "scale",
    "softmax_cross_entropy",
    "sub",
    "trace_relu_signs",
    "grad_check",
    "Adam",
]
