from . import kernels
from .gradcheck import grad_check
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList, Parameter
from .tensor import (
    Node,
    Tensor,
    add,
    bilinear_upsample,
    concat,
    conv2d,
    default_dtype,
    div,
    gelu,
    global_avg_pool,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    pointwise_linear,
    precision,
    relu,
    reshape,
    set_debug,
    sigmoid,
    softmax,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "Conv2d", "LayerNorm", "Linear", "Module", "ModuleList", "Node", "Parameter", "Tensor",
    "add", "bilinear_upsample", "concat", "conv2d", "default_dtype", "div", "gelu",
    "global_avg_pool", "grad_check", "kernels", "layer_norm", "linear", "log_softmax",
    "matmul", "mean", "mul", "no_grad", "pointwise_linear", "precision", "relu", "reshape",
    "set_debug", "sigmoid", "softmax", "sub", "transpose", "tsum",
]
