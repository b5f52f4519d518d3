from . import conv, tensor
from .adam import Adam
from .gradcheck import finite_difference_check
from .layers import BatchNorm, Conv2d, Linear, TransposedConv2d, glorot_uniform, parameter
from .tensor import Tensor

__all__ = [
    "Adam", "BatchNorm", "Conv2d", "Linear", "Tensor", "TransposedConv2d",
    "conv", "finite_difference_check", "glorot_uniform", "parameter", "tensor",
]
