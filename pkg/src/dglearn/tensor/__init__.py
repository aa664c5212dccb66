from .gradcheck import NonFiniteError, gradient_check
from .layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Dense,
    Flatten,
    Layer,
    MaxPool2d,
    Parameter,
    ReLU,
    Sequential,
    ShapeError,
    layer_forward,
)
from .optim import LrSchedule, cross_entropy, grad_norm_sq, sgd_step, zero_grad

__all__ = [
    "AvgPool2d", "BatchNorm2d", "Conv2d", "Dense", "Flatten", "Layer", "LrSchedule",
    "MaxPool2d", "NonFiniteError", "Parameter", "ReLU", "Sequential", "ShapeError",
    "cross_entropy", "grad_norm_sq", "gradient_check", "layer_forward", "sgd_step",
    "zero_grad",
]
