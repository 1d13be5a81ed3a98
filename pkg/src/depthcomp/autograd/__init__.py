from .tensor import Tensor, no_grad, as_tensor
from .ops import (
    LayerParams, ShapeError, layer_forward, conv2d, conv_transpose2d, batch_norm, relu,
    concat_channels, add, sub, mul, abs, square, sum, mean, masked_select,
    avg_pool_resize, bilinear_sample, max_pool2d, dropout,
)

__all__ = [
    "Tensor", "no_grad", "as_tensor", "LayerParams", "ShapeError", "layer_forward",
    "conv2d", "conv_transpose2d", "batch_norm", "relu", "concat_channels", "add", "sub",
    "mul", "abs", "square", "sum", "mean", "masked_select", "avg_pool_resize",
    "bilinear_sample", "max_pool2d", "dropout",
]
