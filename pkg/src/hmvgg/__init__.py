"""HM-VGG: VGG backbone with hybrid attention and multi-level residual fusion, on a numpy autodiff tape."""
from .autograd import Tape, Variable, backward, grad_check
from .errors import HMVGGError
from .model import ModelConfig, hmvgg_forward, init_params, load_checkpoint, save_checkpoint

__all__ = [
    "HMVGGError",
    "ModelConfig",
    "Tape",
    "Variable",
    "backward",
    "grad_check",
    "hmvgg_forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
