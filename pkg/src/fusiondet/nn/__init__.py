"""Minimal hand-differentiated neural-network core."""

from .dense import as_dense
from .gradcheck import (
    GradCheckReport,
    check_packed,
    grad_check,
    pack_arrays,
    unpack_vector,
)
from .layers import (
    ACTIVATIONS,
    LayerTape,
    conv3x3,
    conv3x3_backward,
    init_conv3x3,
    init_linear,
    linear,
    linear_backward,
    relu_act,
    relu_backward,
    sigmoid,
    sigmoid_act,
    sigmoid_backward,
    tanh_act,
    tanh_backward,
    upsample_nearest,
    upsample_nearest_backward,
)
from .params import ParamStore, adam_step

__all__ = [
    "ACTIVATIONS",
    "GradCheckReport",
    "LayerTape",
    "ParamStore",
    "adam_step",
    "as_dense",
    "check_packed",
    "conv3x3",
    "conv3x3_backward",
    "grad_check",
    "pack_arrays",
    "unpack_vector",
    "init_conv3x3",
    "init_linear",
    "linear",
    "linear_backward",
    "relu_act",
    "relu_backward",
    "sigmoid",
    "sigmoid_act",
    "sigmoid_backward",
    "tanh_act",
    "tanh_backward",
    "upsample_nearest",
    "upsample_nearest_backward",
]
