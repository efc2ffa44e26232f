"""
Image-quality metrics on magnitude images.

The dynamic range is always taken from the reference: max|ref|.
"""

from pathlib import Path
from typing import Optional, Sequence, Tuple, Union
import logging

import numpy as np
from skimage.metrics import structural_similarity

from .kspace_io import write_png
from .types import KspaceLoupeError, MetricReport, SampleMetrics

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 200.0
SSIM_WINDOW_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MIN_SSIM_SIZE = 11


class MetricsError(KspaceLoupeError):
    """Raised for mismatched images or empty metric lists"""
    pass


def _magnitudes(x: np.ndarray, ref: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    if np.shape(x) != np.shape(ref):
        raise MetricsError(f"Image shape {np.shape(x)} does not match reference {np.shape(ref)}")
    mag_x = np.abs(np.asarray(x)).astype(np.float64)
    mag_ref = np.abs(np.asarray(ref)).astype(np.float64)
    peak = float(mag_ref.max(initial=0.0))
    if peak == 0.0:
        raise MetricsError("Reference image is identically zero")
    return mag_x, mag_ref, peak


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """20 log10(max|ref| / RMSE) in dB, capped at 200 dB (also the value for MSE = 0)."""
    mag_x, mag_ref, peak = _magnitudes(x, ref)
    mse = float(np.mean((mag_x - mag_ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak ** 2 / mse))


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid positions."""
    mag_x, mag_ref, peak = _magnitudes(x, ref)
    if min(mag_ref.shape) < MIN_SSIM_SIZE:
        raise MetricsError(f"SSIM needs images of at least {MIN_SSIM_SIZE}x{MIN_SSIM_SIZE}, "
                           f"got {mag_ref.shape}")
    value = structural_similarity(mag_x, mag_ref, data_range=peak, gaussian_weights=True,
                                  sigma=SSIM_WINDOW_SIGMA, use_sample_covariance=False,
                                  K1=SSIM_K1, K2=SSIM_K2)
    return float(value)


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (N-1); the std of one value is 0."""
    if len(values) == 0:
        raise MetricsError("Cannot aggregate an empty list")
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate(per_sample: Sequence[SampleMetrics]) -> MetricReport:
    if not per_sample:
        raise MetricsError("Cannot aggregate an empty list")
    psnrs = tuple(m.psnr_db for m in per_sample)
    ssims = tuple(m.ssim for m in per_sample)
    if not (np.all(np.isfinite(psnrs)) and np.all(np.isfinite(ssims))):
        raise MetricsError("Non-finite metric values")
    psnr_mean, psnr_std = mean_std(psnrs)
    ssim_mean, ssim_std = mean_std(ssims)
    return MetricReport(
        psnr_values=psnrs,
        ssim_values=ssims,
        psnr_mean=psnr_mean,
        psnr_std=psnr_std,
        ssim_mean=ssim_mean,
        ssim_std=ssim_std,
        n=len(per_sample),
        single_sample=len(per_sample) == 1,
        samples=tuple(per_sample),
    )


def error_map(x: np.ndarray, ref: np.ndarray, gain: float = 5.0) -> np.ndarray:
    """gain * ||x| - |ref|| / max|ref|, clipped to [0, 1]."""
    mag_x, mag_ref, peak = _magnitudes(x, ref)
    return np.clip(gain * np.abs(mag_x - mag_ref) / peak, 0.0, 1.0)


def save_magnitude_png(x: np.ndarray, path: Union[str, Path],
                       vmax: Optional[float] = None) -> None:
    mag = np.abs(x)
    top = float(mag.max(initial=0.0)) if vmax is None else vmax
    write_png(path, mag / top if top > 0 else mag)
    logger.debug("Wrote %s", path)
