"""Minimal float64 tensor engine with reverse-mode differentiation."""
from .ops import (add_channel, concat_channels, conv3, dense, group_norm, laplacian,
                  resample, slice_channels, spatial_gradient, stack_batch)
from .optim import AdamState, adam_step
from .tensor import (Tape, Tensor, abs_, active_tape, backward, linear_map, mean,
                     record, reshape, silu, square, tanh, tsum)

__all__ = [
    "Tensor", "Tape", "backward", "record", "active_tape", "linear_map",
    "abs_", "square", "tanh", "silu", "mean", "tsum", "reshape",
    "conv3", "group_norm", "resample", "concat_channels", "slice_channels",
    "spatial_gradient", "laplacian", "add_channel", "dense", "stack_batch",
    "AdamState", "adam_step",
]
