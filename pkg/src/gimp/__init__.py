"""Gene-induced multimodal pre-training for image-omic classification, in numpy."""

from ._kernels import backend
from .config import TrainConfig, profile_config
from .model import GiMPModel

__version__ = "0.1.0"

__all__ = ["GiMPModel", "TrainConfig", "backend", "profile_config", "__version__"]
