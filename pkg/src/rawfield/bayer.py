"""Bayer mosaic layout, mosaicking, and bilinear demosaicking."""

import numpy as np
from scipy.signal import convolve2d

from .validation import check_even_dims, check_plane, check_rgb

__all__ = ["channel_map", "channel_masks", "mosaic", "demosaic_bilinear"]

# 2x2 quad -> channel index (0=R, 1=G, 2=B), row-major
_PATTERNS = {
    "RGGB": ((0, 1), (1, 2)),
    "BGGR": ((2, 1), (1, 0)),
    "GRBG": ((1, 0), (2, 1)),
    "GBRG": ((1, 2), (0, 1)),
}

# Bilinear interpolation stencils; same-channel sites repeat with period 2,
# so a 3x3 stencil normalized by the local site count is exact bilinear.
_KERNEL_RB = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0
_KERNEL_G = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0


def _quad(pattern):
    try:
        return _PATTERNS[pattern]
    except KeyError:
        raise ValueError(f"unknown bayer pattern {pattern!r}") from None


def channel_map(pattern, height, width):
    """Per-pixel active channel indices, shape (H, W), values in {0, 1, 2}."""
    quad = _quad(pattern)
    cmap = np.empty((height, width), dtype=np.int64)
    for dy in (0, 1):
        for dx in (0, 1):
            cmap[dy::2, dx::2] = quad[dy][dx]
    return cmap


def channel_masks(pattern, height, width):
    """Boolean masks (3, H, W) of the Bayer-active sites per channel."""
    cmap = channel_map(pattern, height, width)
    return np.stack([cmap == c for c in range(3)], axis=0)


def mosaic(rgb, pattern="RGGB"):
    """Keep only the Bayer-active channel of each pixel.

    Returns a single-channel plane of the same height/width.
    """
    rgb = check_rgb(rgb, "rgb", require_finite=False)
    check_even_dims(rgb, "rgb")
    cmap = channel_map(pattern, rgb.shape[0], rgb.shape[1])
    return np.take_along_axis(rgb, cmap[:, :, None], axis=2)[:, :, 0]


def demosaic_bilinear(plane, pattern="RGGB"):
    """Bilinear demosaic with edge-replication boundary handling.

    Measured sites pass through unchanged; missing channels are the average
    of the available same-channel neighbors in the 3x3 stencil.
    """
    plane = check_plane(plane, "plane", require_finite=False)
    check_even_dims(plane, "plane")
    h, w = plane.shape
    masks = channel_masks(pattern, h, w).astype(np.float64)
    padded = np.pad(plane, 1, mode="edge")
    out = np.empty((h, w, 3), dtype=np.float64)
    for c in range(3):
        kernel = _KERNEL_G if c == 1 else _KERNEL_RB
        mask_p = np.pad(masks[c], 1, mode="edge")
        num = convolve2d(padded * mask_p, kernel, mode="valid")
        den = convolve2d(mask_p, kernel, mode="valid")
        out[:, :, c] = num / den
        # exactness at measured sites regardless of rounding in the stencil
        site = masks[c] > 0
        out[:, :, c][site] = plane[site]
    return out
