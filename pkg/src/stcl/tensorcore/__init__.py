from stcl.tensorcore.tensor import Tape, Tensor, active_tape, as_tensor, backward, no_grad
from stcl.tensorcore.ops import (
    add, concat_last, conv1d_causal, conv1d_same, dropout, getitem, layer_norm, linear,
    matmul, mean, mse_mean, mul, relu, reshape, softmax_last, sub, sum, transpose,
)
from stcl.tensorcore.optim import AdamState, adam_step, noam_lr
from stcl.tensorcore.gradcheck import grad_check

__all__ = [
    "Tape", "Tensor", "active_tape", "as_tensor", "backward", "no_grad",
    "add", "concat_last", "conv1d_causal", "conv1d_same", "dropout", "getitem",
    "layer_norm", "linear", "matmul", "mean", "mse_mean", "mul", "relu", "reshape",
    "softmax_last", "sub", "sum", "transpose",
    "AdamState", "adam_step", "noam_lr", "grad_check",
]
