"""Minimal deterministic reverse-mode differentiation core."""

from .gradcheck import ProbeResult, all_close, check_gradient
from .losses import BCE_EPS, IGNORE_INDEX, bce, log_softmax, softmax_ce
from .ops import (
    ShapeError,
    add,
    channel_dropout,
    concat,
    conv2d,
    dropout,
    leaky_relu,
    mean,
    mul,
    relu,
    sigmoid,
    spatial_mean,
    upsample_bilinear,
)
from .optim import LrSchedule, OptimizerState, poly_lr, sgd_step
from .tensor import NonFiniteError, Tensor, parameter

__all__ = [
    "BCE_EPS",
    "IGNORE_INDEX",
    "LrSchedule",
    "NonFiniteError",
    "OptimizerState",
    "ProbeResult",
    "ShapeError",
    "Tensor",
    "add",
    "all_close",
    "bce",
    "channel_dropout",
    "check_gradient",
    "concat",
    "conv2d",
    "dropout",
    "leaky_relu",
    "log_softmax",
    "mean",
    "mul",
    "parameter",
    "poly_lr",
    "relu",
    "sgd_step",
    "sigmoid",
    "softmax_ce",
    "spatial_mean",
    "upsample_bilinear",
]
