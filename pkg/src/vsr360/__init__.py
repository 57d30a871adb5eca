"""360-degree equirectangular video super-resolution toolkit."""

from .autodiff import Tape, Tensor, backward, finite_difference_grad
from .losses import latitude_weights, total_loss, wmse
from .metrics import psnr, ssim, ws_psnr, ws_ssim
from .model import SmfnConfig, SmfnModel

__all__ = [
    "Tape", "Tensor", "backward", "finite_difference_grad",
    "latitude_weights", "total_loss", "wmse",
    "psnr", "ssim", "ws_psnr", "ws_ssim",
    "SmfnConfig", "SmfnModel",
]

__version__ = "0.1.0"
