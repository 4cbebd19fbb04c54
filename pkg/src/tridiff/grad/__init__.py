from .engine import (
    Tensor, Tape, active_tape, reset_tape, no_grad, enable_grad, grad_enabled,
    astensor, backward, grad,
    add, sub, mul, div, neg, power, exp, log, sqrt, absolute, softplus,
    sigmoid, matmul, reshape, transpose, getitem, embed, concat, tsum, tmean,
    cumprod, gather_rows, scatter_rows, plane_sample, plane_scatter, conv2d,
    softmax, silu, stack, broadcast_to, layer_norm_core, affine,
    retain_grads,
)
from . import nn
from . import checkpoint
