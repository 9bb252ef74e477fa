"""Latent score-based generative modeling with nonlinear forward
diffusions toward structured Gaussian-mixture references."""

__version__ = "0.1.0"

from .gmm import DiagonalGmm
from .model import LatentScoreGenerator
from .sde import DiffusionSpec, TimeGrid
from .training import TrainConfig

__all__ = ["DiagonalGmm", "LatentScoreGenerator", "DiffusionSpec",
           "TimeGrid", "TrainConfig", "__version__"]
