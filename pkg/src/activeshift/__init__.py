"""Convolution deconstructed into a learnable per-channel shift plus pointwise convolution."""

from .errors import ConfigError, FormatError, ShapeError, StateError, UsageError
from .shift import (
    GroupedShiftSpec,
    InitMode,
    ShiftParams,
    asl_backward,
    asl_forward,
    decompose_conv,
    init_shift,
    shift_grouped,
    shift_integer,
)
from .tensor import (
    ConvSpec,
    KernelOffset,
    LayerDesc,
    conv_naive,
    conv_pointwise,
    count_flops,
    depthwise_conv,
    gemm,
    get_num_threads,
    set_num_threads,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FormatError", "ShapeError", "StateError", "UsageError",
    "GroupedShiftSpec", "InitMode", "ShiftParams", "asl_backward", "asl_forward", "decompose_conv",
    "init_shift", "shift_grouped", "shift_integer",
    "ConvSpec", "KernelOffset", "LayerDesc", "conv_naive", "conv_pointwise", "count_flops",
    "depthwise_conv", "gemm", "get_num_threads", "set_num_threads",
]
