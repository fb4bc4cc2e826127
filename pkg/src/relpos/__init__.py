"""Relative-position pretraining objectives on a small numpy transformer."""

from .model import ModelConfig, TransformerModel
from .objectives import VARIANTS
from .trainer import TrainConfig, Trainer, run

__all__ = ["ModelConfig", "TransformerModel", "TrainConfig", "Trainer", "VARIANTS", "run"]
__version__ = "0.1.0"
