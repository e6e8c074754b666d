"""Mixture-of-LoRA adapters with intra/inter modulation on a tiny from-scratch transformer."""

from .adapters import AdapterSet, AdapterSpec, inject
from .backbone import Backbone, ModelConfig, SiteId, forward, freeze, generate, unfreeze
from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    MoEIError,
    NumericError,
    ShapeError,
    UnsupportedVersionError,
)
from .training import METHODS, TrainConfig, adapt, method_spec, pretrain

__version__ = "0.1.0"

__all__ = [
    "AdapterSet",
    "AdapterSpec",
    "Backbone",
    "ConfigError",
    "ContractError",
    "CorruptionError",
    "METHODS",
    "ModelConfig",
    "MoEIError",
    "NumericError",
    "ShapeError",
    "SiteId",
    "TrainConfig",
    "UnsupportedVersionError",
    "adapt",
    "forward",
    "freeze",
    "generate",
    "inject",
    "method_spec",
    "pretrain",
    "unfreeze",
]
