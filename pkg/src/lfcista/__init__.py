"""Depth from light-field EPIs with convolutional sparse coding and its unrolled network."""
from . import convops, csc, evaluate, lightfield, net, synth
from .csc import SolverOptions, solve
from .errors import LfcistaError
from .synth import OpticsConfig
from .net import Architecture, TrainingHyper, infer, load_model, save_model, train

__version__ = "0.1.0"

__all__ = ["convops", "csc", "evaluate", "lightfield", "net", "synth", "SolverOptions", "solve",
           "LfcistaError", "OpticsConfig", "Architecture", "TrainingHyper", "infer", "load_model",
           "save_model", "train", "__version__"]
