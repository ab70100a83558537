"""CPU CNN engine: conv/pool/dense/relu layers, softmax cross-entropy,
beta-stabilized AdaGrad and a base64-JSON model format."""

from .layers import (
    Conv,
    Dense,
    MaxPool,
    Relu,
    ShapeError,
    conv_backward,
    conv_forward,
    fc_backward,
    fc_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_xent,
)
from .optim import AdaGradState, adagrad_update
from .model_io import (
    FORMAT_VERSION,
    ModelFormatError,
    decode_f32,
    deserialize_model,
    encode_f32,
    load_model,
    save_model,
    serialize_model,
)
from .network import LayerSpec, Network, cifar_cnn

__all__ = [
    "Conv",
    "Dense",
    "MaxPool",
    "Relu",
    "ShapeError",
    "conv_forward",
    "conv_backward",
    "maxpool_forward",
    "maxpool_backward",
    "fc_forward",
    "fc_backward",
    "relu_forward",
    "relu_backward",
    "softmax",
    "softmax_xent",
    "AdaGradState",
    "adagrad_update",
    "FORMAT_VERSION",
    "ModelFormatError",
    "encode_f32",
    "decode_f32",
    "serialize_model",
    "deserialize_model",
    "save_model",
    "load_model",
    "LayerSpec",
    "Network",
    "cifar_cnn",
]
