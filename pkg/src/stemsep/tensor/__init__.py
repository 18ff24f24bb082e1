"""Differentiable tensor engine: exactly the ops the separator needs."""

from .core import (
    Param,
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    channel_bias,
    channel_scale,
    concat,
    div,
    exp,
    expand,
    flip,
    grad_enabled,
    log,
    matmul,
    mean_,
    mul,
    narrow,
    neg,
    no_grad,
    outer_scale,
    pow_,
    reshape,
    sigmoid,
    sqrt,
    sub,
    sum_,
    tanh,
    transpose,
)
from .nn import (
    LstmDirParams,
    LstmParams,
    activation,
    bilstm,
    conv1d,
    conv1d_transposed,
    conv_out_len,
    gelu,
    glu,
    group_norm,
    init_lstm,
    layer_norm,
    linear,
    relu,
    softmax,
    softplus,
)
from .gradcheck import grad_check, numeric_grad
from .checkpoint import CheckpointError, load_params, save_params

__all__ = [
    "Param",
    "ShapeError",
    "Tensor",
    "abs_",
    "add",
    "activation",
    "as_tensor",
    "backward",
    "bilstm",
    "channel_bias",
    "channel_scale",
    "concat",
    "conv1d",
    "conv1d_transposed",
    "conv_out_len",
    "div",
    "exp",
    "expand",
    "flip",
    "gelu",
    "glu",
    "grad_check",
    "grad_enabled",
    "group_norm",
    "init_lstm",
    "layer_norm",
    "linear",
    "log",
    "LstmDirParams",
    "LstmParams",
    "matmul",
    "mean_",
    "mul",
    "narrow",
    "neg",
    "no_grad",
    "numeric_grad",
    "outer_scale",
    "pow_",
    "relu",
    "reshape",
    "save_params",
    "load_params",
    "CheckpointError",
    "sigmoid",
    "softmax",
    "softplus",
    "sqrt",
    "sub",
    "sum_",
    "tanh",
    "transpose",
]
