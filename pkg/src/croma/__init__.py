"""Toy-scale radar/optical pretraining with contrastive and masked-reconstruction objectives."""

from .model import ModelConfig

__version__ = "0.1.0"

__all__ = ["ModelConfig", "__version__"]
