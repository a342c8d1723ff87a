"""Brain-anatomy-prior pretraining on 3D MRI: a numpy autograd engine, the
encoder / two-decoder pretext model, the frozen-encoder classifier, phantom
data, augmentation, metrics and NIfTI/checkpoint IO."""
from .config import Settings, load_settings
from .model import DownstreamModel, ModelConfig, PretextModel
from .tensor import Tensor
from .volume import Volume

__all__ = ["DownstreamModel", "ModelConfig", "PretextModel", "Settings", "Tensor", "Volume", "load_settings"]
__version__ = "0.1.0"
