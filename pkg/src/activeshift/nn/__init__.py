from .layers import (
    ActiveShift,
    BatchNorm,
    Conv1x1,
    Conv3x3,
    DepthwiseConv3x3,
    GlobalAvgPool,
    Layer,
    Linear,
    Param,
    ReLU,
    Residual,
    Sequential,
    eltwise_sum,
    softmax_xent,
)
from .network import Network
from .optim import SGD, LinearSchedule, StepSchedule, normalized_shift_update

__all__ = [
    "ActiveShift", "BatchNorm", "Conv1x1", "Conv3x3", "DepthwiseConv3x3", "GlobalAvgPool",
    "Layer", "Linear", "Network", "Param", "ReLU", "Residual", "Sequential",
    "SGD", "LinearSchedule", "StepSchedule", "eltwise_sum", "normalized_shift_update", "softmax_xent",
]
