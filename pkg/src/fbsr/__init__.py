"""Filter-bank regression super-resolution for anisotropic volumes.

Stage 1 completes an M-channel filter bank around a fixed slice profile;
Stage 2 regresses the missing detail coefficients from the observed coarse
channel and synthesises an isotropic volume.
"""
from .filterbank import (CoefficientSet, FilterBank, analyze, analyze_image, cosine_modulated_init,
                         load_bank, pr_error, save_bank, synthesize, synthesize_image)
from .signal import BoundaryMode, Kernel, convolve1d, decimate, gaussian_kernel, upsample_zero
from .volume import AcquisitionSpec, Volume

__all__ = [
    "AcquisitionSpec", "BoundaryMode", "CoefficientSet", "FilterBank", "Kernel", "Volume",
    "analyze", "analyze_image", "convolve1d", "cosine_modulated_init", "decimate",
    "gaussian_kernel", "load_bank", "pr_error", "save_bank", "synthesize", "synthesize_image",
    "upsample_zero",
]
__version__ = "0.1.0"
