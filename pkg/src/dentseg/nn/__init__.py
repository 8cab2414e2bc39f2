from .functional import GradientTape
from .graph import Merge, ModelGraph, Tap
from .layers import (
    BatchNorm,
    Conv2d,
    ConvTranspose2x,
    Dropout,
    Layer,
    MaxPool2x2,
    ReLU,
    Sigmoid,
    UpsampleNearest2x,
)

__all__ = [
    "BatchNorm", "Conv2d", "ConvTranspose2x", "Dropout", "GradientTape", "Layer", "MaxPool2x2",
    "Merge", "ModelGraph", "ReLU", "Sigmoid", "Tap", "UpsampleNearest2x",
]
