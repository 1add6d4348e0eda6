"""Affine color alignment and image-quality metrics (PSNR, SSIM, raw PSNR)."""

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_same_shape

__all__ = [
    "AlignmentFit",
    "affine_align",
    "align_channels",
    "psnr",
    "masked_psnr",
    "ssim",
    "raw_psnr",
    "AffineAligner",
    "PSNR_CAP_DB",
]

PSNR_CAP_DB = 99.0


@dataclass
class AlignmentFit:
    a: float
    b: float

    def apply_inverse(self, y):
        return (np.asarray(y, dtype=np.float64) - self.b) / self.a


def affine_align(x, y):
    """Least-squares a*x + b ~= y, then return (fit, (y - b) / a).

    x is the reference; the aligned estimate matches x's scale and offset.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_shape(x, y, "x", "y")
    mx, my = x.mean(), y.mean()
    var_x = (x * x).mean() - mx * mx
    if var_x <= 0:
        raise ValueError("reference is constant; affine alignment is undefined")
    a = ((x * y).mean() - mx * my) / var_x
    if a == 0:
        raise ValueError("degenerate alignment (a = 0)")
    b = my - a * mx
    fit = AlignmentFit(float(a), float(b))
    return fit, fit.apply_inverse(y)


def align_channels(x, y):
    """Per-channel affine alignment for (H, W, C) images."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    aligned = np.empty_like(y)
    fits = []
    for c in range(x.shape[2]):
        fit, aligned[:, :, c] = affine_align(x[:, :, c], y[:, :, c])
        fits.append(fit)
    return fits, aligned


def psnr(x, y, peak=1.0):
    """-10 log10(MSE / peak^2), capped at 99 dB for identical images."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_shape(x, y, "x", "y")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return min(float(-10.0 * np.log10(mse / peak**2)), PSNR_CAP_DB)


def masked_psnr(x, y, mask, peak=1.0):
    """PSNR with mask-weighted MSE; mask broadcasts over trailing channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_shape(x, y, "x", "y")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == x.ndim - 1:
        mask = mask[..., None]
    total = mask.sum() * (x.shape[-1] if mask.shape[-1] == 1 and x.ndim == 3 else 1)
    if total == 0:
        raise ValueError("mask selects no pixels")
    mse = float((mask * (x - y) ** 2).sum() / total)
    if mse == 0:
        return PSNR_CAP_DB
    return min(float(-10.0 * np.log10(mse / peak**2)), PSNR_CAP_DB)


def _gaussian_kernel(sigma=1.5, radius=5):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _ssim_single(x, y, k1, k2, sigma, radius, peak):
    kernel = _gaussian_kernel(sigma, radius)
    if min(x.shape) < 2 * radius + 1:
        raise ValueError(f"image smaller than the {2 * radius + 1}x{2 * radius + 1} SSIM window")
    filt = lambda z: convolve2d(z, kernel, mode="valid")
    ux, uy = filt(x), filt(y)
    vxx = filt(x * x) - ux * ux
    vyy = filt(y * y) - uy * uy
    vxy = filt(x * y) - ux * uy
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vxx + vyy + c2))
    return float(s.mean())


def ssim(x, y, peak=1.0, k1=0.01, k2=0.03, sigma=1.5, radius=5):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Multichannel inputs are scored per channel and averaged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_shape(x, y, "x", "y")
    if x.ndim == 3:
        return float(
            np.mean([_ssim_single(x[:, :, c], y[:, :, c], k1, k2, sigma, radius, peak)
                     for c in range(x.shape[2])])
        )
    return _ssim_single(x, y, k1, k2, sigma, radius, peak)


def raw_psnr(x_raw, y_raw, peak=1.0):
    """PSNR in Bayer space after aligning each of the four subplanes separately.

    x_raw is the ground truth RawImage, y_raw the estimate; both must share
    the Bayer pattern.
    """
    if x_raw.bayer_pattern != y_raw.bayer_pattern:
        raise ValueError("bayer patterns differ")
    x, y = x_raw.plane, y_raw.plane
    check_same_shape(x, y, "x", "y")
    aligned = np.empty_like(y)
    for dy in (0, 1):
        for dx in (0, 1):
            _, aligned[dy::2, dx::2] = affine_align(x[dy::2, dx::2], y[dy::2, dx::2])
    return psnr(x, aligned, peak=peak)


class AffineAligner(BaseEstimator, TransformerMixin):
    """Fit an affine map from a reference image, then undo it on estimates.

    fit(X, y): X is the reference (ground truth), y the estimate whose color
    calibration should be matched. transform(y) returns (y - b_) / a_.
    """

    def __init__(self, per_channel=True):
        self.per_channel = per_channel

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.per_channel and X.ndim == 3:
            fits, _ = align_channels(X, y)
            self.a_ = np.array([f.a for f in fits])
            self.b_ = np.array([f.b for f in fits])
        else:
            fit, _ = affine_align(X, y)
            self.a_, self.b_ = fit.a, fit.b
        return self

    def transform(self, y):
        return (np.asarray(y, dtype=np.float64) - self.b_) / self.a_
