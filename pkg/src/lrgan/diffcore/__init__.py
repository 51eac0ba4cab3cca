"""Minimal reverse-mode autodiff engine: tensors, ops, modules, grad checks."""

from .tensor import (
    DimensionError,
    Graph,
    GraphError,
    Parameter,
    Tensor,
    active_graph,
    add,
    backward,
    clamp,
    concat,
    constant,
    default_dtype,
    default_dtype_ctx,
    div,
    exp,
    leaky_relu,
    log,
    make_op,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    nonlinearity,
    power,
    relu,
    reset_graph,
    reshape,
    set_default_dtype,
    sigmoid,
    softplus,
    sum_,
    take,
    tanh,
)
from .ops import (
    avg_pool,
    batch_norm,
    conv2d,
    conv2d_transposed,
    linear,
    log_softmax,
    lstm_cell,
)
from .module import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LSTMCell,
    Linear,
    Module,
    bn_gamma_init,
    conv_init,
    fanin_uniform_init,
)
from .gradcheck import GradCheckReport, gradient_check

__all__ = [name for name in dir() if not name.startswith("_")]
