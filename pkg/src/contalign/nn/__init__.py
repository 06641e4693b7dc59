from .autograd import DimensionError, Parameter, Tensor, concat
from .functional import (
    conv1d_channel,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    layer_norm_2d,
    linear,
    log_softmax,
    softmax,
)
from .modules import (
    ChannelConv1d,
    Conv2d,
    ConvTranspose2d,
    LayerNorm2d,
    Linear,
    Module,
)
from .optim import Adam
from .rng import Rng

__all__ = [
    "Adam",
    "ChannelConv1d",
    "Conv2d",
    "ConvTranspose2d",
    "DimensionError",
    "LayerNorm2d",
    "Linear",
    "Module",
    "Parameter",
    "Rng",
    "Tensor",
    "concat",
    "conv1d_channel",
    "conv2d",
    "conv_transpose2d",
    "global_avg_pool",
    "layer_norm_2d",
    "linear",
    "log_softmax",
    "softmax",
]
