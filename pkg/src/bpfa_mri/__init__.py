"""Compressed-sensing MRI reconstruction with beta-process dictionary learning and TV."""

__version__ = "0.1.0"

from .metrics import psnr
from .phantoms import add_noise, make_phantom
from .recon import ReconConfig, reconstruct
from .sampling import apply_mask, make_mask, zero_fill

__all__ = ["psnr", "add_noise", "make_phantom", "ReconConfig", "reconstruct", "apply_mask",
           "make_mask", "zero_fill", "__version__"]
