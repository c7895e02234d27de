"""Minimal tensor library: tape-based reverse-mode autodiff plus an Adam optimiser."""

from .core import DEFAULT_DTYPE, ShapeError, Tensor, backward, grad, is_recording, recording
from .functional import (
    activation,
    add,
    apply_linear,
    concat,
    conv2d,
    crop,
    half_sq_norm,
    leaky_relu,
    mul,
    normalize_channels,
    pad,
    sigmoid,
    sub,
    total,
    upsample,
)
from .optim import Adam

__all__ = [
    "DEFAULT_DTYPE", "ShapeError", "Tensor", "backward", "grad", "is_recording", "recording",
    "activation", "add", "apply_linear", "concat", "conv2d", "crop", "half_sq_norm", "leaky_relu",
    "mul", "normalize_channels", "pad", "sigmoid", "sub", "total", "upsample", "Adam",
]
