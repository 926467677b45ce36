"""Blind source separation with kernel-regression-prior VAEs and their baselines."""

__version__ = "0.1.0"

from .evaluation import max_correlation, time_epochs
from .signals import generate_sources, make_mixing, mix
from .training import TrainConfig, train

__all__ = ["__version__", "generate_sources", "make_mixing", "mix", "TrainConfig", "train",
           "max_correlation", "time_epochs"]
