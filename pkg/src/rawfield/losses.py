"""Training losses: tonemapped, gradient-weighted (unbiased), plain L2,
variable-exposure scaling with learned per-channel calibration, and
Bayer-masked supervision.

The gradient-weighted loss squares (y_hat - y) / (sg(y_hat) + eps) where
sg() is a stop-gradient: the denominator is treated as a constant during
differentiation, so minimizing it drives y_hat to the plain (unbiased)
mean of the observations while weighting errors like a log tonemap would.
"""

import enum
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "LossVariant",
    "LossConfig",
    "tonemapped_loss",
    "gradient_weighted_loss",
    "plain_l2_loss",
    "gradient_weighted_residual",
    "tonemapped_residual",
    "ExposureCalibration",
    "expose",
    "bayer_masked_loss",
]


class LossVariant(str, enum.Enum):
    GRADIENT_WEIGHTED = "gradient_weighted"
    TONEMAPPED = "tonemapped"
    PLAIN_L2 = "plain_l2"


@dataclass
class LossConfig:
    epsilon: float = 1e-3
    variant: LossVariant = LossVariant.GRADIENT_WEIGHTED
    clip_grad: float | None = None  # advisory; the trainer's grad_clip_norm governs

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not isinstance(self.variant, LossVariant):
            self.variant = LossVariant(self.variant)


# --- reference (value, gradient) implementations on plain arrays ---------


def tonemapped_loss(y_hat, y, cfg=None):
    """Sum of squared differences after the log tonemap psi(z) = log(z + eps).

    Reference implementation for bias demonstrations; both arguments must
    stay above -eps for the log to be defined.
    """
    cfg = cfg or LossConfig()
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(y_hat + cfg.epsilon <= 0) or np.any(y + cfg.epsilon <= 0):
        raise ValueError("tonemapped loss needs arguments > -epsilon (log domain)")
    return float(np.sum((np.log(y_hat + cfg.epsilon) - np.log(y + cfg.epsilon)) ** 2))


def tonemapped_loss_grad(y_hat, y, cfg=None):
    """Gradient of tonemapped_loss w.r.t. y_hat."""
    cfg = cfg or LossConfig()
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return 2.0 * (np.log(y_hat + cfg.epsilon) - np.log(y + cfg.epsilon)) / (y_hat + cfg.epsilon)


def gradient_weighted_loss(y_hat, y, cfg=None):
    """Relative-MSE loss; returns (value, gradient w.r.t. y_hat).

    value = sum(((y_hat - y) / (sg(y_hat) + eps))^2)
    gradient = 2 (y_hat - y) / (sg(y_hat) + eps)^2
    The weight contributes no derivative (stop-gradient contract), so the
    gradient vanishes exactly at y_hat = y.
    """
    cfg = cfg or LossConfig()
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = 1.0 / (y_hat + cfg.epsilon)  # frozen weight
    value = float(np.sum(((y_hat - y) * w) ** 2))
    grad = 2.0 * (y_hat - y) * w * w
    return value, grad


def plain_l2_loss(y_hat, y):
    """Unweighted L2; returns (value, gradient w.r.t. y_hat)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = y_hat - y
    return float(np.sum(diff**2)), 2.0 * diff


# --- torch surfaces used by the trainer ----------------------------------


def gradient_weighted_residual(y_hat, y, epsilon):
    """Residual whose square is the gradient-weighted loss (detached weight)."""
    return (y_hat - y) / (y_hat.detach() + epsilon)


def tonemapped_residual(y_hat, y, epsilon):
    """log(y_hat + eps) - log(clamp(y, 0) + eps); observations are clipped
    below at zero so the log stays defined on noisy raw data."""
    return torch.log(y_hat + epsilon) - torch.log(torch.clamp(y, min=0.0) + epsilon)


class ExposureCalibration:
    """Learned per-channel scale for each unique shutter speed.

    Parameterized in log space so the scale stays positive. The entry for
    the longest shutter is frozen at exactly 1 (zero gradient) to anchor
    the scene's global scale.
    """

    def __init__(self, shutters, dtype=torch.float64):
        shutters = sorted({float(t) for t in shutters})
        if not shutters:
            raise ValueError("need at least one shutter speed")
        if any(t <= 0 or not np.isfinite(t) for t in shutters):
            raise ValueError(f"shutter speeds must be finite and positive, got {shutters}")
        self.shutters = shutters
        self.t_max = shutters[-1]
        self.log_alpha = torch.zeros((len(shutters), 3), dtype=dtype, requires_grad=True)
        mask = torch.ones((len(shutters), 3), dtype=dtype)
        mask[-1] = 0.0  # freeze the longest shutter
        self.log_alpha.register_hook(lambda g: g * mask)
        self._index = {t: i for i, t in enumerate(self.shutters)}

    def index_of(self, shutter):
        try:
            return self._index[float(shutter)]
        except KeyError:
            raise KeyError(f"shutter {shutter} not registered in the calibration") from None

    def alpha(self):
        """(T, 3) tensor of positive scales; row t_max is exactly 1."""
        return torch.exp(self.log_alpha)

    def alpha_for(self, shutter):
        return self.alpha()[self.index_of(shutter)]

    def parameters(self):
        return [self.log_alpha]

    def state(self):
        return {"shutters": self.shutters, "log_alpha": self.log_alpha.detach().numpy().tolist()}

    @classmethod
    def from_state(cls, state, dtype=torch.float64):
        cal = cls(state["shutters"], dtype=dtype)
        with torch.no_grad():
            cal.log_alpha.copy_(torch.tensor(state["log_alpha"], dtype=dtype))
        return cal


def expose(y_hat, shutter, alpha):
    """min(y_hat * t * alpha, 1): scale rendered HDR color to a shutter's
    brightness and saturate at the white level.

    y_hat: (N, 3); shutter: scalar or (N,); alpha: (3,) or (N, 3).
    The clip zeroes gradients in saturated regions.
    """
    shutter = torch.as_tensor(shutter, dtype=y_hat.dtype)
    if shutter.ndim == 1:
        shutter = shutter[:, None]
    return torch.clamp(y_hat * shutter * alpha, max=1.0)


def bayer_masked_loss(y_hat_rgb, y, channel_idx, cfg, calibration=None, shutter=None,
                      shutter_index=None):
    """Per-ray loss on the Bayer-active channel only.

    Composes expose (when a calibration and shutter are given) with the
    configured loss variant against the observed raw scalar y. Inactive
    channels contribute nothing to the value or the gradients.
    shutter_index optionally precomputes the calibration row per ray.
    Returns the per-ray loss tensor.
    """
    if calibration is not None:
        if shutter is None:
            raise ValueError("shutter required when applying exposure calibration")
        if shutter_index is not None:
            alpha = calibration.alpha()[shutter_index]
        elif torch.is_tensor(shutter) and shutter.ndim == 1:
            alpha = calibration.alpha()[torch.as_tensor(
                [calibration.index_of(float(t)) for t in shutter])]
        else:
            alpha = calibration.alpha_for(float(shutter))
        y_hat_rgb = expose(y_hat_rgb, shutter, alpha)
    active = y_hat_rgb.gather(1, channel_idx[:, None]).squeeze(1)
    if cfg.variant is LossVariant.GRADIENT_WEIGHTED:
        res = gradient_weighted_residual(active, y, cfg.epsilon)
    elif cfg.variant is LossVariant.TONEMAPPED:
        res = tonemapped_residual(active, y, cfg.epsilon)
    else:
        res = active - y
    return res.pow(2)
