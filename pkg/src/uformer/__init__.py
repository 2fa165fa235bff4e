"""Uformer image restoration in plain numpy, with its own reverse-mode autograd."""

from .accounting import count_macs, count_params
from .model import ConfigError, Model, UformerConfig, UformerParams, build, forward, tiny_config, variant
from .tensor import DimensionError, Tensor

__all__ = [
    "ConfigError",
    "DimensionError",
    "Model",
    "Tensor",
    "UformerConfig",
    "UformerParams",
    "build",
    "count_macs",
    "count_params",
    "forward",
    "tiny_config",
    "variant",
]

__version__ = "0.1.0"
