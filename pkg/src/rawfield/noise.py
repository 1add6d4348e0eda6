"""Shot/read noise synthesis and estimation, plus shutter miscalibration.

Sensor noise is modeled as zero-mean Gaussian whose variance is affine in
the clean signal: var = shot * max(x, 0) + read. The max() keeps pixels
below the black level at read-noise-only variance. No clipping is applied
to the noisy output (raw data keeps headroom below zero).
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import bayer

__all__ = [
    "NoiseParams",
    "MiscalibrationTable",
    "sample_noise",
    "fit_noise_params",
    "apply_miscalibration",
    "NoiseParamsEstimator",
    "NoiseInjector",
]


@dataclass
class NoiseParams:
    shot: float = 0.0
    read: float = 0.0

    def __post_init__(self):
        if self.shot < 0 or self.read < 0:
            raise ValueError(f"noise parameters must be nonnegative, got {self}")

    def variance(self, x):
        return self.shot * np.maximum(np.asarray(x, dtype=np.float64), 0.0) + self.read


@dataclass
class MiscalibrationTable:
    """Ground-truth per-channel gain for each shutter time; 1.0 at the longest."""

    alpha: dict = field(default_factory=dict)  # shutter -> (3,) gains

    def __post_init__(self):
        self.alpha = {float(t): np.asarray(a, dtype=np.float64) for t, a in self.alpha.items()}
        for t, a in self.alpha.items():
            if a.shape != (3,) or np.any(a <= 0):
                raise ValueError(f"gains for shutter {t} must be 3 positive values, got {a}")
        if self.alpha:
            t_max = max(self.alpha)
            if not np.array_equal(self.alpha[t_max], np.ones(3)):
                raise ValueError(f"gains at the longest shutter ({t_max}) must be exactly 1")

    def gains(self, shutter):
        try:
            return self.alpha[float(shutter)]
        except KeyError:
            raise KeyError(f"no miscalibration entry for shutter {shutter}") from None


def sample_noise(x, params, seed):
    """Add zero-mean Gaussian noise with signal-dependent variance.

    Deterministic given (x, params, seed): the same seed yields bit-identical
    output. Pixels are drawn in one vectorized pass, so the result is also
    independent of any outer parallelism over images.
    """
    x = np.asarray(x, dtype=np.float64)
    if params.shot == 0.0 and params.read == 0.0:
        return x.copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    sigma = np.sqrt(params.variance(x))
    return x + sigma * rng.standard_normal(x.shape)


def fit_noise_params(pairs, n_bins=32, min_count=100):
    """Affine fit of empirical variance vs binned clean signal.

    pairs: iterable of (clean_plane, noisy_plane). Returns NoiseParams with
    slope=shot and intercept=read, both clamped at zero.
    """
    clean = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c, _ in pairs])
    noisy = np.concatenate([np.asarray(n, dtype=np.float64).ravel() for _, n in pairs])
    if clean.size != noisy.size:
        raise ValueError("clean/noisy sizes differ")
    lo, hi = clean.min(), clean.max()
    if hi - lo <= 0:
        raise ValueError("need at least two distinct clean signal levels to fit")
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.digitize(clean, edges) - 1, 0, n_bins - 1)
    err = noisy - clean
    levels, variances = [], []
    for b in range(n_bins):
        sel = idx == b
        if sel.sum() < min_count:
            continue
        levels.append(clean[sel].mean())
        variances.append(np.mean(err[sel] ** 2))
    if len(levels) < 2:
        raise ValueError("fewer than two usable bins; not enough distinct clean levels")
    slope, intercept = np.polyfit(np.asarray(levels), np.asarray(variances), 1)
    return NoiseParams(shot=max(float(slope), 0.0), read=max(float(intercept), 0.0))


def apply_miscalibration(plane, meta, table):
    """Scale each Bayer-active channel of a raw plane by its shutter gain."""
    gains = table.gains(meta.shutter)
    plane = np.asarray(plane, dtype=np.float64)
    cmap = bayer.channel_map(meta.bayer_pattern, plane.shape[0], plane.shape[1])
    return plane * gains[cmap]


class NoiseParamsEstimator(BaseEstimator):
    """sklearn-style wrapper: fit shot/read noise from (clean, noisy) pairs."""

    def __init__(self, n_bins=32, min_count=100):
        self.n_bins = n_bins
        self.min_count = min_count

    def fit(self, X, y=None):
        """X: list of (clean, noisy) plane pairs."""
        params = fit_noise_params(X, self.n_bins, self.min_count)
        self.shot_ = params.shot
        self.read_ = params.read
        return self

    @property
    def params_(self):
        return NoiseParams(self.shot_, self.read_)


class NoiseInjector(BaseEstimator, TransformerMixin):
    """Transformer adding synthetic sensor noise to clean raw planes."""

    def __init__(self, shot=0.0, read=0.0, seed=0):
        self.shot = shot
        self.read = read
        self.seed = seed

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        params = NoiseParams(self.shot, self.read)
        if isinstance(X, np.ndarray):
            return sample_noise(X, params, self.seed)
        return [sample_noise(x, params, self.seed + i) for i, x in enumerate(X)]
