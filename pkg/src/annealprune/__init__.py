"""Annealed magnitude pruning of neural-network layers, with a small numpy training engine."""

from .network import Network, build_baseline_cnn, build_mlp
from .pruning import ApHyperparams, MaskState, ap_epoch_end, scheduled_nonzero
from .tensor import Rng

__version__ = "0.1.0"

__all__ = ["Network", "build_baseline_cnn", "build_mlp", "ApHyperparams", "MaskState",
           "ap_epoch_end", "scheduled_nonzero", "Rng"]
