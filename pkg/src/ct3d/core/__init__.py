from .autograd import Node, backward, constant, leaf
from .gradcheck import finite_diff_check
from .ops import (
    DEFAULT_DTYPE,
    as_tensor,
    conv3d,
    depthwise_conv3d,
    gelu,
    layer_norm,
    log_softmax,
    softmax,
    trilinear_resize,
)

__all__ = [
    "DEFAULT_DTYPE",
    "Node",
    "as_tensor",
    "backward",
    "constant",
    "conv3d",
    "depthwise_conv3d",
    "finite_diff_check",
    "gelu",
    "layer_norm",
    "leaf",
    "log_softmax",
    "softmax",
    "trilinear_resize",
]
