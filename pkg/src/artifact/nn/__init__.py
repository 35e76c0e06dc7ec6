from .tensor import (Tensor, ShapeError, NonScalarLoss, backward, linear,
                     gru_cell, causal_self_attention, layer_norm, relu,
                     dropout, embedding_lookup, index_rows, mse_loss, softmax,
                     concat, stack, tanh, reshape, transpose)
from .optim import (ParameterStore, LiveParams, NonFiniteGradient, adam_step,
                    lr_at, init_linear_weight, global_grad_norm)
from .checkpoint import save_params, load_params

__all__ = [
    "Tensor", "ShapeError", "NonScalarLoss", "backward", "linear", "gru_cell",
    "causal_self_attention", "layer_norm", "relu", "dropout",
    "embedding_lookup", "index_rows", "mse_loss", "softmax", "concat",
    "stack", "tanh", "reshape", "transpose",
    "ParameterStore", "LiveParams", "NonFiniteGradient", "adam_step", "lr_at",
    "init_linear_weight", "global_grad_norm", "save_params", "load_params",
]
