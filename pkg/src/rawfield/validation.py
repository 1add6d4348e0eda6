"""Input validation helpers shared across the package."""

import numpy as np

__all__ = [
    "check_plane",
    "check_rgb",
    "check_even_dims",
    "check_positive",
    "check_vector",
    "check_matrix",
    "check_same_shape",
]


def check_plane(x, name="plane", require_finite=True):
    """Coerce to a 2D float array, optionally requiring finite values."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {x.shape}")
    if require_finite and not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_rgb(x, name="image", require_finite=True):
    """Coerce to an (H, W, 3) float array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {x.shape}")
    if require_finite and not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_even_dims(x, name="image"):
    h, w = x.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"{name} dimensions must be even (full Bayer quads), got {h}x{w}")
    return x


def check_positive(value, name):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_vector(v, n, name):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ValueError(f"{name} must be a {n}-vector, got shape {v.shape}")
    return v


def check_matrix(m, shape, name):
    m = np.asarray(m, dtype=np.float64)
    if m.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {m.shape}")
    return m


def check_same_shape(a, b, name_a="a", name_b="b"):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{name_a} and {name_b} must share a shape: {np.shape(a)} vs {np.shape(b)}")
    return a, b
