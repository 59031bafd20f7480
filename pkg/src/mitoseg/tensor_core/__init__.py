"""Minimal dense-tensor engine: the ops the segmentation network needs, with hand-written gradients."""

from .ops import (
    adam_step,
    bilinear_upsample2x,
    bilinear_upsample2x_backward,
    conv2d,
    conv2d_backward,
    dropout,
    dropout_backward,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_bce_loss,
)
from .tensor import AdamState, ShapeError, Tensor

__all__ = [
    "AdamState",
    "ShapeError",
    "Tensor",
    "adam_step",
    "bilinear_upsample2x",
    "bilinear_upsample2x_backward",
    "conv2d",
    "conv2d_backward",
    "dropout",
    "dropout_backward",
    "maxpool2x2",
    "maxpool2x2_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_bce_loss",
]
