"""Low-dose CT simulation and dilated-convolution residual denoising."""

from .autodiff import Tape, Tensor, grad_check
from .estimators import DilatedResidualDenoiser, LowDoseSimulator
from .metrics import WINDOW_PRESETS, WindowSpec, apply_window, psnr, ssim
from .network import ArchSpec, LayerSpec, build_arch, count_weights, receptive_field
from .perceptual import LossConfig, combined_loss, perceptual_loss
from .physics import CtImage, Sinogram, iradon, poisson_sample, radon, simulate_low_dose
from .training import TrainConfig, normalize, split_dataset, train

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "grad_check",
    "DilatedResidualDenoiser",
    "LowDoseSimulator",
    "WINDOW_PRESETS",
    "WindowSpec",
    "apply_window",
    "psnr",
    "ssim",
    "ArchSpec",
    "LayerSpec",
    "build_arch",
    "count_weights",
    "receptive_field",
    "LossConfig",
    "combined_loss",
    "perceptual_loss",
    "CtImage",
    "Sinogram",
    "iradon",
    "poisson_sample",
    "radon",
    "simulate_low_dose",
    "TrainConfig",
    "normalize",
    "split_dataset",
    "train",
    "__version__",
]
