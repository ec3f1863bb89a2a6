from .core import NonFiniteError, ShapeError, Tensor, as_tensor, grad_enabled, no_grad
from .ops import (
    batch_norm,
    concat_channels,
    conv2d,
    cross_entropy,
    dice_loss,
    fully_connected,
    global_avg_pool,
    instance_norm,
    max_pool2x2,
    pad_edge,
    relu,
    sigmoid,
    slice_channels,
    softmax,
    upsample_nearest2x,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "cross_entropy",
    "dice_loss",
    "fully_connected",
    "global_avg_pool",
    "grad_enabled",
    "instance_norm",
    "max_pool2x2",
    "no_grad",
    "pad_edge",
    "relu",
    "sigmoid",
    "slice_channels",
    "softmax",
    "upsample_nearest2x",
]
