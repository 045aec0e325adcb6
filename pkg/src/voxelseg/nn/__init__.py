"""Minimal reverse-mode autodiff with the 3D layers a U-Net needs."""
from voxelseg.nn.checkpoint import load_checkpoint, save_checkpoint
from voxelseg.nn.gradcheck import grad_check
from voxelseg.nn.kernels import BACKEND
from voxelseg.nn.ops import (
    add,
    batchnorm,
    concat_channels,
    conv3d,
    maxpool3d,
    mul,
    relu,
    softmax_channels,
    total,
    transposed_conv3d,
    weighted_sum,
)
from voxelseg.nn.tensor import Tape, Tensor

__all__ = [
    "BACKEND", "Tape", "Tensor", "add", "batchnorm", "concat_channels", "conv3d",
    "grad_check", "load_checkpoint", "maxpool3d", "mul", "relu", "save_checkpoint",
    "softmax_channels", "total", "transposed_conv3d", "weighted_sum",
]
