from .tensor import (
    ConfigurationError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    clamp,
    concat,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    default_dtype,
    div,
    exp,
    l1_loss,
    layernorm,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    reshape,
    set_default_dtype,
    soft_cross_entropy,
    softmax,
    sub,
    transpose,
    tsum,
)
from .optim import Adam, AdamState, adam_step
from .checkpoint import FormatError

__all__ = [
    "Adam", "AdamState", "ConfigurationError", "FormatError", "NonFiniteError", "ShapeError", "Tensor",
    "adam_step", "add", "clamp", "concat", "conv2d", "conv_transpose2d", "cross_entropy", "default_dtype",
    "div", "exp", "l1_loss", "layernorm", "leaky_relu", "log", "log_softmax", "matmul", "mean", "mul",
    "no_grad", "precision", "reshape", "set_default_dtype", "soft_cross_entropy", "softmax", "sub",
    "transpose", "tsum",
]
