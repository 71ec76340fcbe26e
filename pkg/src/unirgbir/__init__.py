"""Frozen-ViT RGB-IR adapter: multi-modal feature pool and supplementary feature injector."""

from .core import (
    ImagePair,
    ModelConfig,
    MultiScaleTokens,
    TokenMap,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    seed_all,
)
from .model import UniRgbIrModel

__all__ = [
    "ImagePair",
    "ModelConfig",
    "MultiScaleTokens",
    "TokenMap",
    "TrainConfig",
    "UniRgbIrModel",
    "load_checkpoint",
    "save_checkpoint",
    "seed_all",
]

__version__ = "0.1.0"
