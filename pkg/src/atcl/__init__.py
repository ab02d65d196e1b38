"""Adversarial embedding perturbation with a contrastive representation loss, on a numpy transformer."""

from .training import TrainConfig, train

__all__ = ["TrainConfig", "train"]
__version__ = "0.1.0"
