"""Numpy tape autodiff and optimizers used by the rest of the package."""

from .autodiff import (
    GraphError,
    NonFiniteError,
    Tensor,
    add,
    backward,
    batch_norm,
    dropout,
    gradients,
    loss_and_grads,
    masked_row_norm_mean,
    masked_row_sqnorm_mean,
    matmul,
    mul,
    relu,
    row_norm_mean,
    row_sqnorm_mean,
    scale,
    softmax_cross_entropy,
    square,
    stop_gradient,
    sub,
    sum_all,
)
from .optim import SGD, PlateauScheduler

__all__ = [
    "GraphError",
    "NonFiniteError",
    "Tensor",
    "add",
    "backward",
    "batch_norm",
    "dropout",
    "gradients",
    "loss_and_grads",
    "masked_row_norm_mean",
    "masked_row_sqnorm_mean",
    "matmul",
    "mul",
    "relu",
    "row_norm_mean",
    "row_sqnorm_mean",
    "scale",
    "softmax_cross_entropy",
    "square",
    "stop_gradient",
    "sub",
    "sum_all",
    "SGD",
    "PlateauScheduler",
]
