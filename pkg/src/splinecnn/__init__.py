"""Conditional CNNs with layer weights embedded on B-spline manifolds.

Layers carry K knot tensors on a 1D spline; each sample projects its
features to a position in [0, 1], optionally blended with the position
inherited from the previous layer, and the layer weight is the spline
evaluated there.  Training regularizes the position distribution by
maximizing its entropy and minimizing its label-conditional entropy through
a differentiable soft quantizer.
"""

from .data import Dataset, load_mnist_dir, load_mnist_idx
from .decisions import DiffusionSchedule, PositionState
from .models import build_lenet, build_spline_lenet
from .regularizer import Quantizer, RegConfig, reg_loss
from .spline import SplineBank, basis_eval, spline_eval
from .tensor import DTensor, backward
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DTensor", "backward", "SplineBank", "basis_eval", "spline_eval",
    "PositionState", "DiffusionSchedule", "Quantizer", "RegConfig", "reg_loss",
    "build_lenet", "build_spline_lenet", "Dataset", "load_mnist_idx",
    "load_mnist_dir", "TrainConfig", "train", "evaluate",
    "save_checkpoint", "load_checkpoint", "__version__",
]
