import math

import numpy as np

from .core import ConfigError

PEAK = 255.0


def mse(x, ref) -> float:
    x = np.abs(np.asarray(x))
    ref = np.abs(np.asarray(ref))
    if x.shape != ref.shape:
        raise ConfigError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return float(np.mean((x - ref) ** 2))


def psnr(x, ref, peak: float = PEAK) -> float:
    """PSNR in dB of magnitudes on the [0, 255] scale.

    Returns ``math.inf`` for identical images and raises for a constant
    reference.
    """
    ref_mag = np.abs(np.asarray(ref))
    if np.ptp(ref_mag) == 0:
        raise ConfigError("reference image is constant; PSNR is undefined")
    err = mse(x, ref)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / err))
