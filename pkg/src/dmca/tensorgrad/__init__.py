"""Minimal reverse-mode tensor engine used by the policy network."""

from .checkpoint import CheckpointError, load, load_records, save
from .gradcheck import analytic_grads, grad_check
from .nn import (ParamStore, attention, dense, glorot_uniform, gumbel_softmax, lstm_step, mlp,
                 multi_head_attention, sample_gumbel)
from .optim import AdamState, adam_step, clip_grad_norm
from .tensor import (Tape, Tensor, add, as_tensor, backward, concat, div, exp, index, log, log_softmax,
                     matmul, mean, mul, relu, reshape, sigmoid, softmax, square, stack,
                     stop_gradient, straight_through, sub, sum_, tanh, transpose)

__all__ = [
    "AdamState", "CheckpointError", "ParamStore", "Tape", "Tensor", "adam_step", "add", "as_tensor",
    "analytic_grads", "attention", "backward", "clip_grad_norm", "concat", "dense", "div", "exp",
    "glorot_uniform", "grad_check", "gumbel_softmax", "index", "load", "load_records", "log",
    "log_softmax", "lstm_step", "matmul", "mean", "mlp", "mul", "multi_head_attention", "relu",
    "reshape", "sample_gumbel", "save", "sigmoid", "softmax", "square", "stack", "stop_gradient",
    "straight_through", "sub", "sum_", "tanh", "transpose",
]
