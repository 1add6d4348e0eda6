"""Forward camera postprocessing (raw -> LDR sRGB) and its inverse.

The forward pipeline, in order: normalize by black/white level, bilinear
demosaic, white balance division, combined color matrix, percentile
exposure rescale, clip to [0, 1], sRGB gamma. The inverse ("unprocessing")
maps linear HDR RGB back to a mosaicked raw plane with no clipping, no
gamma, and no quantization, so noise-free round trips are exact.
"""

import enum
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import bayer
from .validation import check_plane, check_positive, check_rgb

__all__ = [
    "ColorSpace",
    "LinearRGBImage",
    "RawImage",
    "PipelineConfig",
    "RGB_TO_XYZ",
    "normalize_raw",
    "white_balance",
    "build_color_transform",
    "srgb_gamma",
    "postprocess",
    "postprocess_rgb",
    "unprocess",
    "unprocess_rgb",
    "exposure_divisor",
    "RawPostprocessor",
    "Unprocessor",
]

# Linear sRGB (D65) -> XYZ
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)


class ColorSpace(enum.Enum):
    CAMERA_RGB = "camera_rgb"
    LINEAR_RGB = "linear_rgb"


@dataclass
class LinearRGBImage:
    pixels: np.ndarray
    color_space: ColorSpace

    def __post_init__(self):
        self.pixels = check_rgb(self.pixels, "pixels")
        if not isinstance(self.color_space, ColorSpace):
            self.color_space = ColorSpace(self.color_space)

    def require_space(self, space):
        if self.color_space is not space:
            raise ValueError(f"expected {space}, image is tagged {self.color_space}")
        return self


@dataclass
class RawImage:
    plane: np.ndarray
    bayer_pattern: str
    meta: "CameraMetadata"

    def __post_init__(self):
        self.plane = check_plane(self.plane, "plane")
        if self.plane.shape[0] % 2 or self.plane.shape[1] % 2:
            raise ValueError(f"raw plane dimensions must be even, got {self.plane.shape}")


@dataclass
class PipelineConfig:
    exposure_percentile: float = 97.0
    apply_demosaic: bool = True
    exposure_gain: float | None = None  # when set, rescale divisor is 1/gain

    def __post_init__(self):
        if not 0.0 < self.exposure_percentile <= 100.0:
            raise ValueError(f"percentile must be in (0, 100], got {self.exposure_percentile}")
        if self.exposure_gain is not None:
            check_positive(self.exposure_gain, "exposure_gain")


def normalize_raw(dn_plane, meta):
    """Map digital numbers to [black=0, white=1], preserving values below zero."""
    if meta.white_level <= meta.black_level:
        raise ValueError(
            f"invalid metadata: white_level {meta.white_level} <= black_level {meta.black_level}"
        )
    plane = np.asarray(dn_plane, dtype=np.float64)
    plane = (plane - meta.black_level) / (meta.white_level - meta.black_level)
    return RawImage(plane, meta.bayer_pattern, meta)


def white_balance(pixels, wb_gains, inverse=False):
    """Divide each channel by its white-balance gain (multiply when inverse)."""
    gains = np.asarray(wb_gains, dtype=np.float64)
    check_positive(gains, "wb_gains")
    pixels = check_rgb(pixels, "pixels")
    return pixels * gains if inverse else pixels / gains


def build_color_transform(ccm):
    """Combined camera-RGB -> linear-RGB matrix: rownorm((RGB_TO_XYZ @ ccm)^-1).

    Each row of the result sums to 1, so neutral camera colors stay neutral.
    """
    ccm = np.asarray(ccm, dtype=np.float64)
    product = RGB_TO_XYZ @ ccm
    if abs(np.linalg.det(product)) < 1e-15:
        raise ValueError("color transform is singular")
    inv = np.linalg.inv(product)
    return inv / inv.sum(axis=1, keepdims=True)


def srgb_gamma(z):
    """Standard sRGB opto-electronic transfer curve; input is clamped to [0, 1]."""
    z = np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0)
    return np.where(z <= 0.0031308, 12.92 * z, 1.055 * np.power(z, 1.0 / 2.4) - 0.055)


def exposure_divisor(pixels, cfg):
    """Rescale divisor for the exposure step (percentile over all channels jointly)."""
    if cfg.exposure_gain is not None:
        return 1.0 / cfg.exposure_gain
    p = np.percentile(pixels, cfg.exposure_percentile)
    return max(float(p), 1e-12)  # guard all-zero images


def postprocess_rgb(pixels, meta, cfg=None):
    """Pipeline steps 5-9 on already-demosaicked camera-RGB pixels."""
    cfg = cfg or PipelineConfig()
    z = white_balance(pixels, meta.wb_gains)
    z = z @ build_color_transform(meta.ccm).T
    z = z / exposure_divisor(z, cfg)
    z = np.clip(z, 0.0, 1.0)
    return srgb_gamma(z)


def postprocess(raw, cfg=None):
    """Full raw -> LDR sRGB conversion of a RawImage."""
    cfg = cfg or PipelineConfig()
    if cfg.apply_demosaic:
        rgb = bayer.demosaic_bilinear(raw.plane, raw.bayer_pattern)
    else:
        rgb = np.repeat(raw.plane[:, :, None], 3, axis=2)
    return postprocess_rgb(rgb, raw.meta, cfg)


def unprocess_rgb(pixels, meta):
    """Inverse of white balance + color matrix: linear RGB -> camera RGB (pre-mosaic)."""
    c_all = build_color_transform(meta.ccm)
    cam = pixels @ np.linalg.inv(c_all).T
    return white_balance(cam, meta.wb_gains, inverse=True)


def unprocess(img, meta):
    """Linear HDR RGB -> clean raw mosaic (no gamma, no clipping, no quantization)."""
    if isinstance(img, LinearRGBImage):
        img.require_space(ColorSpace.LINEAR_RGB)
        pixels = img.pixels
    else:
        pixels = check_rgb(img, "img")
    cam = unprocess_rgb(pixels, meta)
    plane = bayer.mosaic(cam, meta.bayer_pattern)
    return RawImage(plane, meta.bayer_pattern, meta)


class RawPostprocessor(BaseEstimator, TransformerMixin):
    """Stateless transformer applying the forward pipeline to RawImage inputs."""

    def __init__(self, exposure_percentile=97.0, apply_demosaic=True, exposure_gain=None):
        self.exposure_percentile = exposure_percentile
        self.apply_demosaic = apply_demosaic
        self.exposure_gain = exposure_gain

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        cfg = PipelineConfig(self.exposure_percentile, self.apply_demosaic, self.exposure_gain)
        if isinstance(X, RawImage):
            return postprocess(X, cfg)
        return [postprocess(raw, cfg) for raw in X]


class Unprocessor(BaseEstimator, TransformerMixin):
    """Stateless transformer inverting the pipeline for linear HDR RGB inputs."""

    def __init__(self, meta=None):
        self.meta = meta

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        if self.meta is None:
            raise ValueError("Unprocessor needs camera metadata")
        if isinstance(X, (LinearRGBImage, np.ndarray)):
            return unprocess(X, self.meta)
        return [unprocess(img, self.meta) for img in X]
