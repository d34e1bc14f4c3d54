"""Residual U-Net denoising of OCT-like images with a hybrid MSE + perceptual loss."""

from .estimator import ResUNetDenoiser
from .model import FeatureExtractor, ModelConfig, ResUNet, init_resunet
from .objectives import LossConfig, SsimParams, combined_loss, mse_loss, perceptual_loss, psnr_paper, psnr_standard, ssim

__version__ = "0.1.0"

__all__ = [
    "FeatureExtractor",
    "LossConfig",
    "ModelConfig",
    "ResUNet",
    "ResUNetDenoiser",
    "SsimParams",
    "combined_loss",
    "init_resunet",
    "mse_loss",
    "perceptual_loss",
    "psnr_paper",
    "psnr_standard",
    "ssim",
]
