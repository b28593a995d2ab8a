"""Minimal layer-chain network engine with reverse-mode gradients."""
from splitfed.nn.errors import NonFiniteError, ShapeError, TapeMismatchError
from splitfed.nn.layers import (
    BatchNorm1D,
    Conv1D,
    Dense,
    GlobalAveragePool1D,
    Layer,
    MaxPool1D,
    ReLU,
    ResidualEnd,
    ResidualStart,
)
from splitfed.nn.loss import softmax_cross_entropy
from splitfed.nn.model import (
    ActivationTape,
    ModelGraph,
    backward,
    buffer_count,
    build_model,
    concat,
    forward,
    infer_shapes,
    param_count,
    predict,
)
from splitfed.nn.optim import OptimizerState, sgd_step
from splitfed.nn.archfile import Architecture, load_architecture

__all__ = [
    "ActivationTape", "Architecture", "BatchNorm1D", "Conv1D", "Dense", "GlobalAveragePool1D", "Layer",
    "MaxPool1D", "ModelGraph", "NonFiniteError", "OptimizerState", "ReLU", "ResidualEnd", "ResidualStart",
    "ShapeError", "TapeMismatchError", "backward", "buffer_count", "build_model", "concat", "forward",
    "infer_shapes", "load_architecture", "param_count", "predict", "sgd_step", "softmax_cross_entropy",
]
