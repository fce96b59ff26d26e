"""Sampled-loss recommender laboratory: gBCE, overconfidence theory and a numpy SASRec."""
from .losses import LossSpec, bce_sampled, beta_from_t, gamma_transform, gbce
from .model import DESK_PROFILE, ModelConfig, SASRec
from .theory import converged_sigmoid, numeric_minimizer
from .trainer import TrainConfig, train

__version__ = "0.1.0"
__all__ = ["LossSpec", "bce_sampled", "beta_from_t", "gamma_transform", "gbce", "DESK_PROFILE",
           "ModelConfig", "SASRec", "converged_sigmoid", "numeric_minimizer", "TrainConfig", "train"]
