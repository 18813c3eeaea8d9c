"""Lookup multivariate KAN layers: 2D spline lookups on a sigmoid-percentile grid."""

from .errors import (
    ConfigError,
    CorruptFileError,
    FormatError,
    FusionError,
    LmKanError,
    ShapeError,
    TrainingDivergedError,
)
from .grid import SigmaGrid, build_grid, interval_index, preamble, sigma, sigma_inv
from .spline2d import Func2D, eval2d, eval2d_dense_oracle, grad2d, linear_sheet
from .layers import Activation, BatchNorm, Linear, LmKanLayer, PrecondBlock, init_layer
from .model import Model, build_lmkan_student, build_mlp, build_mlp_student
from .hessian import hessian_penalty, hessian_penalty_grad, model_penalty
from .fusion import fuse_model
from .serialization import load_model, save_model

__version__ = "0.1.0"
