"""Multiplane image extraction and synthetic defocus rendering.

The MPI is a stack of fronto-parallel RGBA planes in linear HDR color,
sampled linearly in disparity within the central camera's frustum and
ordered back-to-front. Each plane holds the field's density/color
composited within its depth slab, so over-compositing the full stack
reproduces the direct volume render.

Defocus: per plane (back to front) the premultiplied color and alpha are
blurred with a unit-sum disc kernel of radius delta_r * |i - i_focus|,
translated by delta_d * i with bilinear resampling, and over-composited.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import shift as ndimage_shift
from scipy.signal import fftconvolve

from .camera import CameraMetadata, generate_rays
from .imgio import read_pfm, write_pfm
from .rendering import ray_aabb_intersect

__all__ = [
    "MPIStack",
    "DefocusParams",
    "blur_kernel",
    "extract_mpi",
    "composite",
    "defocus",
    "save_mpi",
    "load_mpi",
]


@dataclass
class MPIStack:
    planes: np.ndarray      # (N, H, W, 4) RGBA, back-to-front, unpremultiplied color
    disparities: np.ndarray  # (N,) strictly increasing (back-to-front)
    meta: CameraMetadata

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        self.disparities = np.asarray(self.disparities, dtype=np.float64)
        if self.planes.ndim != 4 or self.planes.shape[3] != 4 or self.planes.shape[0] < 1:
            raise ValueError(f"planes must be (N, H, W, 4) with N >= 1, got {self.planes.shape}")
        if np.any(np.diff(self.disparities) <= 0):
            raise ValueError("disparities must be strictly increasing (back-to-front)")
        alpha = self.planes[..., 3]
        if alpha.min() < -1e-9 or alpha.max() > 1 + 1e-9:
            raise ValueError("alpha outside [0, 1]")


@dataclass
class DefocusParams:
    i_focus: int
    delta_r: float = 0.0
    delta_d: tuple = (0.0, 0.0)
    recenter_translation: bool = False

    def __post_init__(self):
        if self.delta_r < 0:
            raise ValueError("delta_r must be >= 0")
        self.delta_d = tuple(float(v) for v in self.delta_d)


def blur_kernel(r):
    """Unit-sum disc: integer offsets with Euclidean norm <= r (inclusive).

    r = 0 gives the 1x1 identity kernel.
    """
    if r < 0:
        raise ValueError("radius must be >= 0")
    radius = int(np.floor(r + 1e-9))
    ys, xs = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    mask = (xs * xs + ys * ys) <= r * r + 1e-9
    kernel = mask.astype(np.float64)
    return kernel / kernel.sum()


def extract_mpi(field, meta, n_planes, disparity_range=None, samples_per_plane=4):
    """Slice the field into fronto-parallel RGBA planes for the given camera.

    Planes are sampled linearly in disparity; per pixel, each plane
    composites the volume samples inside its depth slab with the same
    segment weights the renderer uses, so recompositing the stack
    front-to-back reproduces the direct render of the central view.
    """
    if n_planes < 1:
        raise ValueError("n_planes must be >= 1")
    i = meta.intrinsics
    vs, us = np.meshgrid(np.arange(i.height), np.arange(i.width), indexing="ij")
    pix = np.stack([us.ravel() + 0.5, vs.ravel() + 0.5], axis=-1)
    origins, dirs = generate_rays(meta, pix)
    origins_t = torch.as_tensor(origins, dtype=field.dtype)
    dirs_t = torch.as_tensor(dirs, dtype=field.dtype)

    # depth along the optical axis per unit ray parameter (unit dirs)
    axis_cos = dirs @ meta.pose.rotation[2]
    if np.any(axis_cos <= 0):
        raise ValueError("camera frustum is degenerate (rays not facing forward)")

    if disparity_range is None:
        lo = torch.as_tensor(field.bbox[0], dtype=field.dtype)
        hi = torch.as_tensor(field.bbox[1], dtype=field.dtype)
        t_near, t_far = ray_aabb_intersect(origins_t, dirs_t, lo, hi)
        hit = (t_far > t_near).numpy()
        if not hit.any():
            raise ValueError("empty frustum: no ray intersects the field bbox")
        z_near = float((t_near.numpy()[hit] * axis_cos[hit]).min())
        z_far = float((t_far.numpy()[hit] * axis_cos[hit]).max())
        z_near = max(z_near, 1e-6)
    else:
        d_min, d_max = disparity_range
        z_near, z_far = 1.0 / d_max, 1.0 / d_min
    if z_far <= z_near:
        raise ValueError(f"empty frustum: depth range [{z_near}, {z_far}]")

    # slab edges linear in disparity; planes ordered back-to-front
    edges_disp = np.linspace(1.0 / z_far, 1.0 / z_near, n_planes + 1)
    disparities = 0.5 * (edges_disp[:-1] + edges_disp[1:])
    z_edges = 1.0 / edges_disp  # decreasing depth, back-to-front

    n_rays = pix.shape[0]
    planes = np.zeros((n_planes, n_rays, 4), dtype=np.float64)
    cos_t = torch.as_tensor(axis_cos, dtype=field.dtype)
    with torch.no_grad():
        for k in range(n_planes):
            t_hi = torch.as_tensor(z_edges[k], dtype=field.dtype) / cos_t   # far slab face
            t_lo = torch.as_tensor(z_edges[k + 1], dtype=field.dtype) / cos_t
            steps = torch.linspace(0.0, 1.0, samples_per_plane + 1, dtype=field.dtype)
            bounds = t_lo[:, None] + (t_hi - t_lo)[:, None] * steps[None, :]
            mids = 0.5 * (bounds[:, 1:] + bounds[:, :-1])
            deltas = bounds[:, 1:] - bounds[:, :-1]
            pts = origins_t[:, None, :] + mids[:, :, None] * dirs_t[:, None, :]
            sigma, color = field.sample(pts.reshape(-1, 3))
            sigma = sigma.reshape(n_rays, samples_per_plane)
            color = color.reshape(n_rays, samples_per_plane, 3)
            tau = sigma * deltas
            accum = torch.cumsum(tau, dim=-1)
            before = torch.cat([torch.zeros_like(accum[:, :1]), accum[:, :-1]], dim=-1)
            w_local = (1.0 - torch.exp(-tau)) * torch.exp(-before)
            premult = (w_local[:, :, None] * color).sum(dim=1)
            alpha = 1.0 - torch.exp(-tau.sum(dim=-1))
            a = alpha.numpy()
            safe = np.maximum(a, 1e-300)
            planes[k, :, :3] = np.where(a[:, None] > 0, premult.numpy() / safe[:, None], 0.0)
            planes[k, :, 3] = a
    planes = planes.reshape(n_planes, i.height, i.width, 4)
    return MPIStack(planes, disparities, meta)


def composite(mpi):
    """Plain back-to-front over-composite of the stack (no blur, no shift)."""
    out = np.zeros(mpi.planes.shape[1:3] + (3,), dtype=np.float64)
    for k in range(mpi.planes.shape[0]):
        color = mpi.planes[k, :, :, :3]
        alpha = mpi.planes[k, :, :, 3]
        out = color * alpha[:, :, None] + (1.0 - alpha[:, :, None]) * out
    return out


def _convolve_same(img, kernel):
    return fftconvolve(img, kernel, mode="same")


def _translate(img, d):
    """Continuous 2D translation by d = (dx, dy) px, bilinear, zero fill."""
    if d[0] == 0.0 and d[1] == 0.0:
        return img
    return ndimage_shift(img, (d[1], d[0]), order=1, mode="constant", cval=0.0,
                         prefilter=False)


def defocus(mpi, params):
    """Synthetic defocus over the stack, back to front.

    For plane i: blur premultiplied color and alpha with a disc of radius
    delta_r * |i - i_focus|, translate both by delta_d * i (bilinear), and
    over-composite: C <- c_trans + (1 - alpha_trans) * C. Blurring happens
    on premultiplied color, so alpha is not re-applied when accumulating.
    """
    n = mpi.planes.shape[0]
    if not 0 <= params.i_focus < n:
        raise ValueError(f"i_focus {params.i_focus} outside [0, {n})")
    out = np.zeros(mpi.planes.shape[1:3] + (3,), dtype=np.float64)
    for i in range(n):
        alpha = mpi.planes[i, :, :, 3]
        premult = mpi.planes[i, :, :, :3] * alpha[:, :, None]
        r = params.delta_r * abs(i - params.i_focus)
        kernel = blur_kernel(r)
        if kernel.shape != (1, 1):
            c_blur = np.stack([_convolve_same(premult[:, :, c], kernel) for c in range(3)], axis=-1)
            a_blur = _convolve_same(alpha, kernel)
        else:
            c_blur, a_blur = premult, alpha
        shift_index = (i - params.i_focus) if params.recenter_translation else i
        d = (params.delta_d[0] * shift_index, params.delta_d[1] * shift_index)
        c_trans = np.stack([_translate(c_blur[:, :, c], d) for c in range(3)], axis=-1)
        a_trans = _translate(a_blur, d)
        out = c_trans + (1.0 - a_trans[:, :, None]) * out
    return out


def save_mpi(directory, mpi):
    """Directory of PFM planes (RGB + alpha) plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    for k in range(mpi.planes.shape[0]):
        write_pfm(os.path.join(directory, f"plane_{k:03d}_rgb.pfm"), mpi.planes[k, :, :, :3])
        write_pfm(os.path.join(directory, f"plane_{k:03d}_alpha.pfm"), mpi.planes[k, :, :, 3])
    manifest = {
        "n_planes": int(mpi.planes.shape[0]),
        "disparities": mpi.disparities.tolist(),
        "camera": mpi.meta.to_dict(),
    }
    with open(os.path.join(directory, "mpi.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_mpi(directory):
    with open(os.path.join(directory, "mpi.json")) as f:
        manifest = json.load(f)
    n = manifest["n_planes"]
    planes = []
    for k in range(n):
        rgb = read_pfm(os.path.join(directory, f"plane_{k:03d}_rgb.pfm"))
        alpha = read_pfm(os.path.join(directory, f"plane_{k:03d}_alpha.pfm"))
        planes.append(np.concatenate([rgb, alpha[:, :, None]], axis=-1))
    return MPIStack(
        np.stack(planes),
        np.asarray(manifest["disparities"]),
        CameraMetadata.from_dict(manifest["camera"]),
    )
