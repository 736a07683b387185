"""Minimal dense-tensor math with reverse-mode differentiation."""

from dmeta.tensor.ops import (
    batchnorm,
    conv2d,
    cross_entropy,
    dropout,
    flatten,
    fully_connected,
    js_divergence,
    maxpool2x2,
    mean,
    one_hot,
    relu,
    softmax,
)
from dmeta.tensor.optim import AdamState, adam_step
from dmeta.tensor.tape import Tape, Tensor

__all__ = [
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "batchnorm",
    "conv2d",
    "cross_entropy",
    "dropout",
    "flatten",
    "fully_connected",
    "js_divergence",
    "maxpool2x2",
    "mean",
    "one_hot",
    "relu",
    "softmax",
]
