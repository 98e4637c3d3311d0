"""Approximate fully Bayesian inference in state-space models: particle
filters with differentiable evidence estimates driving a variational bound
over latent paths and static parameters."""

from . import autodiff, lgss, smc

__all__ = [
    "autodiff",
    "smc",
    "variational",
    "lgss",
    "stochvol",
    "hawkes",
    "training",
    "diagnostics",
]

__version__ = "0.1.0"
