"""Parameter-efficient fine-tuning of a small vision transformer with
gated cross-attention prompt adapters, on a numpy autodiff core."""

from .model import Model, model_for_policy
from .peft import DvptConfig, FreezePolicy
from .tensor import Tape, Tensor, backward
from .vit import ConfigError, TokenSequence, VitConfig

__all__ = [
    "ConfigError",
    "DvptConfig",
    "FreezePolicy",
    "Model",
    "Tape",
    "Tensor",
    "TokenSequence",
    "VitConfig",
    "backward",
    "model_for_policy",
]

__version__ = "0.1.0"
