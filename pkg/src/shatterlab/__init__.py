"""Partition-of-unity attention encoders with a small numpy autograd."""

from .config import ModelConfig, base_config, preset
from .encoder import encode, init_params

__version__ = "0.1.0"

__all__ = ["ModelConfig", "base_config", "encode", "init_params", "preset", "__version__"]
