"""Image quality metrics."""
from __future__ import annotations

import numpy as np

from .losses import ssim

PSNR_CAP = 100.0

__all__ = ["psnr", "ssim"]


def psnr(img, ref) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 100 dB."""
    mse = float(np.mean((np.asarray(img, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10 * np.log10(1.0 / mse))
