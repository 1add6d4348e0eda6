"""Camera metadata, poses, and distortion-aware ray generation.

Conventions: pixel coordinates are (u, v) with u along width and v along
height, the camera looks down +z with x right and y down (so the optical
axis maps to the principal point), and poses store the world-to-camera
rigid transform.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .validation import check_matrix, check_positive, check_vector

__all__ = [
    "Intrinsics",
    "Pose",
    "CameraMetadata",
    "InvalidMetadataError",
    "DistortionConvergenceError",
    "undistort_normalized",
    "generate_ray",
    "generate_rays",
    "project_points",
    "look_at_pose",
]

BAYER_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")


class InvalidMetadataError(ValueError):
    """Camera metadata violates an invariant (e.g. white level <= black level)."""


class DistortionConvergenceError(RuntimeError):
    """Radial distortion inversion failed to converge."""


@dataclass
class Intrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0

    def validate(self):
        check_positive(self.focal, "focal")
        if self.width <= 0 or self.height <= 0:
            raise InvalidMetadataError(f"invalid image size {self.width}x{self.height}")


@dataclass
class Pose:
    """World-to-camera rigid transform x_cam = R @ x_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = check_matrix(self.rotation, (3, 3), "rotation")
        self.translation = check_vector(self.translation, 3, "translation")

    def camera_center(self):
        return -self.rotation.T @ self.translation

    def directions_to_world(self, d_cam):
        return np.asarray(d_cam) @ self.rotation  # == (R.T @ d.T).T

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3))


@dataclass
class CameraMetadata:
    white_level: int
    black_level: int
    wb_gains: np.ndarray
    ccm: np.ndarray
    shutter: float
    iso: float
    pose: Pose
    intrinsics: Intrinsics
    bayer_pattern: str = "RGGB"
    noise_shot: float = 0.0
    noise_read: float = 0.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.wb_gains = check_vector(self.wb_gains, 3, "wb_gains")
        self.ccm = check_matrix(self.ccm, (3, 3), "ccm")
        self.validate()

    def validate(self):
        if self.white_level <= self.black_level or self.black_level < 0:
            raise InvalidMetadataError(
                f"need white_level > black_level >= 0, got {self.white_level}, {self.black_level}"
            )
        if np.any(self.wb_gains <= 0):
            raise InvalidMetadataError(f"wb_gains must be positive, got {self.wb_gains}")
        if self.shutter <= 0:
            raise InvalidMetadataError(f"shutter must be positive, got {self.shutter}")
        if abs(np.linalg.det(self.ccm)) < 1e-12:
            raise InvalidMetadataError("ccm is singular")
        if self.bayer_pattern not in BAYER_PATTERNS:
            raise InvalidMetadataError(f"unknown bayer pattern {self.bayer_pattern}")
        self.intrinsics.validate()

    def to_dict(self):
        i = self.intrinsics
        return {
            "white_level": int(self.white_level),
            "black_level": int(self.black_level),
            "wb_gains": self.wb_gains.tolist(),
            "ccm": self.ccm.tolist(),
            "shutter": float(self.shutter),
            "iso": float(self.iso),
            "bayer_pattern": self.bayer_pattern,
            "pose": {
                "rotation": self.pose.rotation.tolist(),
                "translation": self.pose.translation.tolist(),
            },
            "intrinsics": {
                "focal": float(i.focal),
                "cx": float(i.cx),
                "cy": float(i.cy),
                "width": int(i.width),
                "height": int(i.height),
                "k1": float(i.k1),
                "k2": float(i.k2),
            },
            "noise": {"shot": float(self.noise_shot), "read": float(self.noise_read)},
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d):
        i = d["intrinsics"]
        return cls(
            white_level=d["white_level"],
            black_level=d["black_level"],
            wb_gains=np.asarray(d["wb_gains"], dtype=np.float64),
            ccm=np.asarray(d["ccm"], dtype=np.float64),
            shutter=d["shutter"],
            iso=d.get("iso", 100.0),
            pose=Pose(
                np.asarray(d["pose"]["rotation"], dtype=np.float64),
                np.asarray(d["pose"]["translation"], dtype=np.float64),
            ),
            intrinsics=Intrinsics(
                focal=i["focal"], cx=i["cx"], cy=i["cy"],
                width=i["width"], height=i["height"],
                k1=i.get("k1", 0.0), k2=i.get("k2", 0.0),
            ),
            bayer_pattern=d.get("bayer_pattern", "RGGB"),
            noise_shot=d.get("noise", {}).get("shot", 0.0),
            noise_read=d.get("noise", {}).get("read", 0.0),
            extras=d.get("extras", {}),
        )

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def distort_normalized(x, y, k1, k2):
    """Forward radial distortion on normalized camera coordinates."""
    r2 = x * x + y * y
    s = 1.0 + k1 * r2 + k2 * r2 * r2
    return x * s, y * s


def undistort_normalized(xd, yd, k1, k2, max_iter=20, tol=1e-12):
    """Invert the radial distortion polynomial by fixed-point iteration.

    Raises DistortionConvergenceError when the iteration has not settled
    after max_iter steps (e.g. for extreme distortion coefficients).
    """
    xd = np.asarray(xd, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    if k1 == 0.0 and k2 == 0.0:
        return xd.copy(), yd.copy()
    x, y = xd.copy(), yd.copy()
    for _ in range(max_iter):
        r2 = x * x + y * y
        s = 1.0 + k1 * r2 + k2 * r2 * r2
        x_new = xd / s
        y_new = yd / s
        delta = np.max(np.abs(x_new - x) + np.abs(y_new - y))
        x, y = x_new, y_new
        if delta < tol:
            return x, y
    raise DistortionConvergenceError(
        f"distortion inversion did not converge in {max_iter} iterations (residual {delta:.3g})"
    )


def generate_rays(meta, pixels):
    """Back-project continuous pixel coordinates into world-space rays.

    pixels: (N, 2) array of (u, v). Returns (origins (N, 3), directions (N, 3))
    with unit-norm directions.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    i = meta.intrinsics
    xd = (pixels[:, 0] - i.cx) / i.focal
    yd = (pixels[:, 1] - i.cy) / i.focal
    x, y = undistort_normalized(xd, yd, i.k1, i.k2)
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_world = meta.pose.directions_to_world(d_cam)
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origin = meta.pose.camera_center()
    origins = np.broadcast_to(origin, d_world.shape).copy()
    return origins, d_world


def generate_ray(meta, pixel):
    """Single-pixel convenience wrapper around generate_rays."""
    origins, dirs = generate_rays(meta, np.asarray(pixel, dtype=np.float64)[None, :])
    return origins[0], dirs[0]


def project_points(meta, points_world):
    """Forward model: world points -> distorted pixel coordinates (for tests)."""
    pts = np.atleast_2d(np.asarray(points_world, dtype=np.float64))
    p_cam = pts @ meta.pose.rotation.T + meta.pose.translation
    x = p_cam[:, 0] / p_cam[:, 2]
    y = p_cam[:, 1] / p_cam[:, 2]
    i = meta.intrinsics
    xd, yd = distort_normalized(x, y, i.k1, i.k2)
    return np.stack([xd * i.focal + i.cx, yd * i.focal + i.cy], axis=-1)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera pose for a camera at `eye` looking at `target`.

    Camera axes: z forward (eye -> target), x right, y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    n = np.linalg.norm(x)
    if n < 1e-9:  # looking straight along up; pick any perpendicular
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(z, x)
    rotation = np.stack([x, y, z], axis=0)
    translation = -rotation @ eye
    return Pose(rotation, translation)
