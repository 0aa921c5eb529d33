"""Sampling-free epistemic uncertainty for dropout networks.

Propagates the mean and covariance induced by dropout through a feedforward
network analytically, with a Monte-Carlo dropout oracle for comparison.
"""

__version__ = "0.1.0"

from .mc import McEstimate, convergence_curve, empirical_moments, sample_forward
from .network import NetworkSpec, conv_as_matrix, forward, load_model, save_model
from .propagation import MomentState, NoiseSpec, propagate_network, relu_gaussian_moments

__all__ = [
    "McEstimate", "MomentState", "NetworkSpec", "NoiseSpec", "conv_as_matrix", "convergence_curve",
    "empirical_moments", "forward", "load_model", "propagate_network", "relu_gaussian_moments",
    "sample_forward", "save_model",
]
