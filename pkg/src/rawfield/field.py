"""Dense voxel grid scene representation with trilinear sampling.

The grid stores raw (pre-activation) density and color parameters.
Density goes through softplus, color through exp (linear HDR radiance,
always positive) or sigmoid (LDR mode). Raw values are interpolated first
and activated after, which keeps the interpolant smooth and cheap.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F

__all__ = ["VoxelField", "softplus_inverse"]


def softplus_inverse(y):
    """Scalar inverse of softplus: log(exp(y) - 1)."""
    return math.log(math.expm1(y))


class VoxelField:
    def __init__(self, resolution, bbox, density_raw=None, color_raw=None,
                 color_activation="exp", dtype=torch.float64):
        self.resolution = tuple(int(n) for n in resolution)
        if any(n < 1 for n in self.resolution):
            raise ValueError(f"resolution must be >= 1 per axis, got {self.resolution}")
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        if np.any(self.bbox[1] <= self.bbox[0]):
            raise ValueError(f"bbox must have positive extent, got {self.bbox}")
        if color_activation not in ("exp", "sigmoid"):
            raise ValueError(f"unknown color activation {color_activation!r}")
        self.color_activation = color_activation
        self.dtype = dtype
        nx, ny, nz = self.resolution
        if density_raw is None:
            density_raw = torch.full((nx, ny, nz), softplus_inverse(0.1), dtype=dtype)
        if color_raw is None:
            init = math.log(0.5) if color_activation == "exp" else 0.0
            color_raw = torch.full((nx, ny, nz, 3), init, dtype=dtype)
        self.density_raw = torch.as_tensor(density_raw, dtype=dtype).clone().requires_grad_(True)
        self.color_raw = torch.as_tensor(color_raw, dtype=dtype).clone().requires_grad_(True)
        if self.density_raw.shape != (nx, ny, nz) or self.color_raw.shape != (nx, ny, nz, 3):
            raise ValueError("grid shapes do not match resolution")
        self._lo = torch.as_tensor(self.bbox[0], dtype=dtype)
        self._extent = torch.as_tensor(self.bbox[1] - self.bbox[0], dtype=dtype)
        res = torch.tensor(self.resolution, dtype=torch.long)
        self._nm1 = (res - 1).to(dtype)
        self._i0_max = torch.clamp(res - 2, min=0)
        self._res_minus1 = res - 1

    def parameters(self):
        return [self.density_raw, self.color_raw]

    def node_positions(self):
        """World positions of grid nodes, shape (Nx, Ny, Nz, 3)."""
        axes = [
            np.linspace(self.bbox[0][k], self.bbox[1][k], self.resolution[k])
            if self.resolution[k] > 1 else np.array([self.bbox[0][k]])
            for k in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def _activate_color(self, raw):
        return torch.exp(raw) if self.color_activation == "exp" else torch.sigmoid(raw)

    def sample(self, points):
        """Trilinear field lookup at world points, shape (N, 3).

        Returns (sigma (N,), color (N, 3)). Points outside the bbox get
        sigma = 0 (color is still defined, but carries zero weight).
        """
        points = torch.as_tensor(points, dtype=self.dtype)
        u = (points - self._lo) / self._extent
        inside = ((u >= 0.0) & (u <= 1.0)).all(dim=-1).to(self.dtype)
        g = torch.clamp(u, 0.0, 1.0) * self._nm1
        i0 = torch.minimum(g.floor().long(), self._i0_max)
        f = g - i0.to(self.dtype)
        i1 = torch.minimum(i0 + 1, self._res_minus1)

        _, ny, nz = self.resolution
        fx, fy, fz = f.unbind(-1)
        wx = torch.stack([1.0 - fx, fx], dim=-1)  # (N, 2)
        wy = torch.stack([1.0 - fy, fy], dim=-1)
        wz = torch.stack([1.0 - fz, fz], dim=-1)
        w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
        ix = torch.stack([i0[:, 0], i1[:, 0]], dim=-1)
        iy = torch.stack([i0[:, 1], i1[:, 1]], dim=-1)
        iz = torch.stack([i0[:, 2], i1[:, 2]], dim=-1)
        idx = ((ix[:, :, None, None] * ny + iy[:, None, :, None]) * nz
               + iz[:, None, None, :]).reshape(-1, 8)
        d_corners = torch.take(self.density_raw.reshape(-1), idx)
        c_corners = torch.index_select(self.color_raw.reshape(-1, 3), 0, idx.reshape(-1))
        sigma_raw = (w * d_corners).sum(dim=-1)
        color_raw = torch.bmm(w[:, None, :], c_corners.view(-1, 8, 3)).squeeze(1)
        sigma = F.softplus(sigma_raw) * inside
        color = self._activate_color(color_raw)
        return sigma, color

    def detach_clone(self):
        """Copy with detached parameter tensors (e.g. for ground-truth fields)."""
        return VoxelField(
            self.resolution,
            self.bbox,
            density_raw=self.density_raw.detach(),
            color_raw=self.color_raw.detach(),
            color_activation=self.color_activation,
            dtype=self.dtype,
        )
