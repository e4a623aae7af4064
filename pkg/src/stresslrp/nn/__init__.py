from .io import load_weights, save_weights
from .layers import AvgPool, BatchNorm, Conv2D, Dense, Flatten, MaxPool, ReLU
from .network import (
    ForwardTrace,
    NetworkSpec,
    TraceEntry,
    backward,
    build,
    canonize,
    center_logits,
    fold_batchnorm,
    forward,
    forward_train,
    lenet5,
    predict,
    vgg,
)

__all__ = [
    "AvgPool", "BatchNorm", "Conv2D", "Dense", "Flatten", "MaxPool", "ReLU",
    "ForwardTrace", "NetworkSpec", "TraceEntry", "backward", "build", "canonize", "center_logits", "fold_batchnorm",
    "forward", "forward_train", "lenet5", "predict", "vgg", "load_weights", "save_weights",
]
