"""Small numpy neural-network engine: valid 3x3 convolutions, dense layers,
softmax cross-entropy, layer-stack backprop and Adam."""
from .layers import (
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    cross_entropy,
    dense_backward,
    dense_forward,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
)
from .network import (
    DEFAULT_CONV_WIDTHS,
    ConfigurationError,
    ConvLayer,
    DenseLayer,
    ForwardCache,
    NetworkParams,
    conv_topology,
    head_topology,
    init_conv_stack,
    init_dense_stack,
    network_backward,
    network_forward,
)
from .optim import SCORE_CONFIG, TRACKER_CONFIG, AdamState, TrainConfig, adam_update, lr_schedule
from .serialization import CorruptFileError, load_params, loads_params, dumps_params, save_params

__all__ = [
    "AdamState",
    "ConfigurationError",
    "ConvLayer",
    "CorruptFileError",
    "DEFAULT_CONV_WIDTHS",
    "DenseLayer",
    "ForwardCache",
    "NetworkParams",
    "SCORE_CONFIG",
    "ShapeError",
    "TRACKER_CONFIG",
    "TrainConfig",
    "adam_update",
    "conv2d_backward",
    "conv2d_forward",
    "conv_topology",
    "cross_entropy",
    "dense_backward",
    "dense_forward",
    "dumps_params",
    "head_topology",
    "init_conv_stack",
    "init_dense_stack",
    "load_params",
    "loads_params",
    "lr_schedule",
    "network_backward",
    "network_forward",
    "relu",
    "relu_backward",
    "save_params",
    "softmax",
    "softmax_backward",
]
