"""Differentiable volume rendering over the voxel field.

Per ray: segment boundaries on [t_near, t_far] (optionally stratified),
field samples at segment midpoints, compositing weights
w_i = (1 - exp(-delta_i sigma_i)) * exp(-sum_{j<i} delta_j sigma_j),
color C = sum_i w_i c_i with no background term, expected depth, and the
weight-variance regularizer in closed form.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .camera import generate_rays

__all__ = [
    "RenderResult",
    "ray_aabb_intersect",
    "sample_boundaries",
    "composite_weights",
    "render_rays",
    "weight_variance",
    "render_image",
]


@dataclass
class RenderResult:
    """Per-ray sample set and composited outputs (batch-first tensors)."""

    color: torch.Tensor        # (B, 3)
    boundaries: torch.Tensor   # (B, S+1), strictly increasing where hit
    sigmas: torch.Tensor       # (B, S)
    colors: torch.Tensor       # (B, S, 3)
    weights: torch.Tensor      # (B, S)
    sum_weights: torch.Tensor  # (B,)
    mean_depth: torch.Tensor   # (B,) expected depth of the normalized weight distribution

    @property
    def deltas(self):
        return self.boundaries[:, 1:] - self.boundaries[:, :-1]


def ray_aabb_intersect(origins, directions, bbox_lo, bbox_hi, t_min=0.0):
    """Slab intersection; returns (t_near, t_far) with t_near = t_far for misses."""
    inv = 1.0 / directions
    t_lo = (bbox_lo - origins) * inv
    t_hi = (bbox_hi - origins) * inv
    t_close = torch.nan_to_num(torch.minimum(t_lo, t_hi), nan=-torch.inf)
    t_open = torch.nan_to_num(torch.maximum(t_lo, t_hi), nan=torch.inf)
    t_near = torch.clamp(t_close.amax(dim=-1), min=t_min)
    t_far = t_open.amin(dim=-1)
    miss = t_far <= t_near
    t_near = torch.where(miss, torch.zeros_like(t_near), t_near)
    t_far = torch.where(miss, torch.zeros_like(t_far), t_far)
    return t_near, t_far


def sample_boundaries(t_near, t_far, n_samples, generator=None):
    """Segment boundaries on [t_near, t_far]; endpoints pinned.

    With a generator, interior boundaries are jittered within +-h/2 of the
    uniform partition (stratified, still strictly increasing).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    batch = t_near.shape[0]
    steps = torch.linspace(0.0, 1.0, n_samples + 1, dtype=t_near.dtype)
    span = (t_far - t_near)[:, None]
    boundaries = t_near[:, None] + span * steps[None, :]
    if generator is not None and n_samples > 1:
        h = span / n_samples
        u = torch.rand((batch, n_samples - 1), generator=generator, dtype=t_near.dtype)
        boundaries = boundaries.clone()
        boundaries[:, 1:-1] = boundaries[:, 1:-1] + (u - 0.5) * h
    return boundaries


def composite_weights(sigmas, deltas):
    """Volumetric absorption weights from per-segment densities and lengths."""
    tau = sigmas * deltas
    accum = torch.cumsum(tau, dim=-1)
    before = torch.cat([torch.zeros_like(accum[:, :1]), accum[:, :-1]], dim=-1)
    return (1.0 - torch.exp(-tau)) * torch.exp(-before)


def render_rays(field, origins, directions, n_samples, t_bounds=None, generator=None):
    """Render a batch of rays against the field.

    origins/directions: (B, 3) tensors or arrays (unit directions).
    t_bounds: optional (B, 2); defaults to the field bbox intersection.
    """
    origins = torch.as_tensor(origins, dtype=field.dtype)
    directions = torch.as_tensor(directions, dtype=field.dtype)
    if t_bounds is None:
        lo = torch.as_tensor(field.bbox[0], dtype=field.dtype)
        hi = torch.as_tensor(field.bbox[1], dtype=field.dtype)
        t_near, t_far = ray_aabb_intersect(origins, directions, lo, hi)
    else:
        t_bounds = torch.as_tensor(t_bounds, dtype=field.dtype)
        t_near, t_far = t_bounds[:, 0], t_bounds[:, 1]
        if torch.any(t_near > t_far):
            raise ValueError("degenerate ray bounds (t_near > t_far)")
    boundaries = sample_boundaries(t_near, t_far, n_samples, generator)
    mids = 0.5 * (boundaries[:, 1:] + boundaries[:, :-1])
    deltas = boundaries[:, 1:] - boundaries[:, :-1]
    batch = origins.shape[0]
    points = origins[:, None, :] + mids[:, :, None] * directions[:, None, :]
    sigmas, colors = field.sample(points.reshape(-1, 3))
    sigmas = sigmas.reshape(batch, n_samples)
    colors = colors.reshape(batch, n_samples, 3)
    weights = composite_weights(sigmas, deltas)
    color = (weights[:, :, None] * colors).sum(dim=1)
    sum_w = weights.sum(dim=1)
    mid_depth = (weights * mids).sum(dim=1)
    tiny = torch.finfo(sum_w.dtype).tiny
    mean_depth = torch.where(sum_w > 0, mid_depth / sum_w.clamp_min(tiny), torch.zeros_like(sum_w))
    return RenderResult(color, boundaries, sigmas, colors, weights, sum_w, mean_depth)


def weight_variance(weights, boundaries, normalize=True):
    """Variance of the piecewise-constant depth distribution of each ray.

    Closed form: sum_i w~_i [(t_i - tbar)^2 + (t_i - tbar)(t_{i-1} - tbar)
    + (t_{i-1} - tbar)^2] / 3 with w~ the weights normalized to unit mass
    (the default) or used as-is (normalize=False). Rays with zero total
    weight return 0.
    """
    if not torch.is_tensor(weights):
        weights = torch.as_tensor(weights, dtype=torch.float64)
    boundaries = torch.as_tensor(boundaries, dtype=weights.dtype)
    squeeze = weights.ndim == 1
    if squeeze:
        weights = weights[None, :]
        boundaries = boundaries[None, :]
    t_right = boundaries[:, 1:]
    t_left = boundaries[:, :-1]
    sum_w = weights.sum(dim=1)
    if normalize:
        w = weights / sum_w.clamp_min(torch.finfo(weights.dtype).tiny)[:, None]
    else:
        w = weights
    tbar = (w * 0.5 * (t_right + t_left)).sum(dim=1)
    a = t_right - tbar[:, None]
    b = t_left - tbar[:, None]
    var = (w * (a * a + a * b + b * b)).sum(dim=1) / 3.0
    var = torch.where(sum_w > 0, var, torch.zeros_like(var))
    return var[0] if squeeze else var


def render_image(field, meta, n_samples=128, chunk=16384):
    """Render a full view deterministically (no jitter, no gradients).

    Returns (image (H, W, 3), sum_weights (H, W)) as numpy arrays.
    """
    i = meta.intrinsics
    vs, us = np.meshgrid(np.arange(i.height), np.arange(i.width), indexing="ij")
    pixels = np.stack([us.ravel() + 0.5, vs.ravel() + 0.5], axis=-1)
    origins, dirs = generate_rays(meta, pixels)
    out = np.empty((pixels.shape[0], 3), dtype=np.float64)
    acc = np.empty(pixels.shape[0], dtype=np.float64)
    with torch.no_grad():
        for start in range(0, pixels.shape[0], chunk):
            sl = slice(start, start + chunk)
            res = render_rays(field, origins[sl], dirs[sl], n_samples)
            out[sl] = res.color.numpy()
            acc[sl] = res.sum_weights.numpy()
    return out.reshape(i.height, i.width, 3), acc.reshape(i.height, i.width)
