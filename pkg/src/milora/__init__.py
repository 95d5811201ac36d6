"""Mixture of low-rank experts on frozen temporal attention and spatial convolution."""

from .model import ModelConfig, build_model, forward_summary
from .trainloop import TrainConfig, train

__all__ = ["ModelConfig", "TrainConfig", "build_model", "forward_summary", "train"]
__version__ = "0.1.0"
