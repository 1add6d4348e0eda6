"""PFM (portable float map) and 8-bit PNG image IO.

HDR data is exchanged as PFM: 'PF' for 3-channel, 'Pf' for single-channel,
rows stored bottom-to-top, scale line -1.0 (little-endian floats).
"""

import numpy as np
from PIL import Image

__all__ = ["read_pfm", "write_pfm", "write_png", "read_png"]


def read_pfm(path):
    """Load a PFM file as float32, shape (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed PFM dimensions line")
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(width * height * channels * 4), dtype=endian + "f4")
        if data.size != width * height * channels:
            raise ValueError(f"{path}: truncated PFM payload")
    img = data.reshape(height, width, channels)
    img = np.flipud(img)
    if channels == 1:
        img = img[:, :, 0]
    return np.ascontiguousarray(img.astype(np.float32))


def write_pfm(path, img):
    """Write float data as PFM; 2D arrays become 'Pf', (H, W, 3) becomes 'PF'."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        header = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"cannot write shape {img.shape} as PFM")
    height, width = img.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{width} {height}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(img).astype("<f4").tobytes())


def write_png(path, img):
    """Write an LDR image in [0, 1] as 8-bit PNG (grayscale or RGB)."""
    img = np.asarray(img, dtype=np.float64)
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_png(path):
    """Load an 8-bit PNG back to floats in [0, 1]."""
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0
