from . import functional
from .functional import ShapeError, conv_output_size
from .gradcheck import GradcheckResult, gradcheck, jitter_affine, numerical_gradient, relative_error
from .layers import (BatchNorm2d, Context, Conv2d, GlobalAvgPool, MaxPool2d, Module, Parameter,
                     ReLU, RReLU, Sequential, Upsample)
from .optim import SGD, OptimizerState, sgd_step

__all__ = [
    "functional", "ShapeError", "conv_output_size", "GradcheckResult", "gradcheck", "jitter_affine",
    "numerical_gradient", "relative_error", "BatchNorm2d", "Context", "Conv2d", "GlobalAvgPool",
    "MaxPool2d", "Module", "Parameter", "ReLU", "RReLU", "Sequential", "Upsample", "SGD",
    "OptimizerState", "sgd_step",
]
