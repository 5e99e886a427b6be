"""Shallow-deep synergistic network for infrared small target segmentation."""
from .config import ModelConfig
from .model import SDSNet, build_model

__all__ = ["ModelConfig", "SDSNet", "build_model"]
__version__ = "0.1.0"
