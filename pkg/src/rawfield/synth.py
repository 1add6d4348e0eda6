"""Procedural HDR scenes and synthetic raw dataset generation.

The ablation protocol: bake a ground-truth voxel field from emissive
primitives, render clean HDR views (linear RGB per unit shutter) from ring
poses, scale by the shutter time, unprocess into camera raw space, apply
the optional shutter miscalibration, and add shot/read noise. Shorter
shutters lower the signal against fixed sensor noise, so SNR worsens down
the grid; an infinite shutter entry means "noiseless at the reference
exposure".
"""

import json
import math
import os
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import torch

from .camera import CameraMetadata, Intrinsics, look_at_pose
from .field import VoxelField
from .imgio import read_pfm, write_pfm
from .noise import MiscalibrationTable, NoiseParams, apply_miscalibration, sample_noise
from .pipeline import RawImage, unprocess
from .rendering import render_image

__all__ = [
    "Primitive",
    "SceneSpec",
    "Dataset",
    "default_scene",
    "ring_poses",
    "bake_scene",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

# A plausible XYZ -> cameraRGB matrix; any invertible choice works since the
# pipeline is exercised for self-consistency, not against a physical sensor.
DEFAULT_CCM = np.array(
    [
        [1.06, -0.27, -0.12],
        [-0.43, 1.45, 0.05],
        [-0.05, 0.21, 0.70],
    ]
)
DEFAULT_WB_GAINS = (0.5, 1.0, 0.6)
DEFAULT_BLACK_LEVEL = 528
DEFAULT_WHITE_LEVEL = 4095


@dataclass
class Primitive:
    kind: str                 # "box" | "sphere"
    center: tuple
    color: tuple              # linear HDR radiance per unit shutter
    density: float = 40.0
    size: tuple = (0.5, 0.5, 0.5)  # full extents (box)
    radius: float = 0.25           # (sphere)

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")

    def contains(self, points, margin=0.0):
        points = np.asarray(points, dtype=np.float64)
        center = np.asarray(self.center, dtype=np.float64)
        if self.kind == "box":
            half = 0.5 * np.asarray(self.size, dtype=np.float64) + margin
            return np.all(np.abs(points - center) <= half, axis=-1)
        return np.sum((points - center) ** 2, axis=-1) <= (self.radius + margin) ** 2

    def to_dict(self):
        return {
            "kind": self.kind,
            "center": list(self.center),
            "color": list(self.color),
            "density": self.density,
            "size": list(self.size),
            "radius": self.radius,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], center=tuple(d["center"]), color=tuple(d["color"]),
                   density=d.get("density", 200.0), size=tuple(d.get("size", (0.5, 0.5, 0.5))),
                   radius=d.get("radius", 0.25))


@dataclass
class SceneSpec:
    primitives: list
    bbox: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    n_train: int = 20
    n_test: int = 5
    image_size: int = 64
    focal: float = 96.0
    ring_radius: float = 2.8
    ring_height: float = 1.1
    pose_kind: str = "ring"
    grid_resolution: int = 64
    n_samples_render: int = 128
    shutters: tuple = (1.0 / 15.0,)         # math.inf entries mean "clean"
    noise: NoiseParams = dataclass_field(
        default_factory=lambda: NoiseParams(shot=1e-3, read=1e-4))
    noise_scales: tuple | None = None       # per grid entry, scales the variance
    reference_shutter: float | None = None  # exposure used for inf entries and tests
    miscalibration: MiscalibrationTable | None = None
    wb_gains: tuple = DEFAULT_WB_GAINS
    ccm: np.ndarray = dataclass_field(default_factory=lambda: DEFAULT_CCM.copy())
    black_level: int = DEFAULT_BLACK_LEVEL
    white_level: int = DEFAULT_WHITE_LEVEL
    bayer_pattern: str = "RGGB"
    k1: float = 0.03
    k2: float = 0.0
    iso: float = 800.0
    hdr: bool = True

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        self.ccm = np.asarray(self.ccm, dtype=np.float64)
        if not self.primitives:
            pass  # an empty scene is allowed (renders black)
        else:
            nodes_ok = any(
                np.all(np.asarray(p.center) >= self.bbox[0]) and
                np.all(np.asarray(p.center) <= self.bbox[1])
                for p in self.primitives
            )
            if not nodes_ok:
                raise ValueError("no primitive lies inside the scene bbox")
            if self.hdr:
                colors = np.concatenate([np.asarray(p.color, dtype=np.float64)
                                         for p in self.primitives])
                nonzero = colors[colors > 0]
                if nonzero.size and nonzero.max() / nonzero.min() < 1e3:
                    raise ValueError(
                        "hdr scene needs a >= 1000x ratio between brightest and "
                        f"dimmest colors, got {nonzero.max() / nonzero.min():.1f}")
        if self.noise_scales is not None and len(self.noise_scales) != len(self.shutters):
            raise ValueError("noise_scales must match the shutter grid length")

    def resolve_reference_shutter(self):
        if self.reference_shutter is not None:
            return float(self.reference_shutter)
        finite = [t for t in self.shutters if math.isfinite(t)]
        return max(finite) if finite else 1.0

    def to_dict(self):
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "bbox": self.bbox.tolist(),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "image_size": self.image_size,
            "focal": self.focal,
            "ring_radius": self.ring_radius,
            "ring_height": self.ring_height,
            "pose_kind": self.pose_kind,
            "grid_resolution": self.grid_resolution,
            "n_samples_render": self.n_samples_render,
            "shutters": list(self.shutters),
            "noise": {"shot": self.noise.shot, "read": self.noise.read},
            "noise_scales": list(self.noise_scales) if self.noise_scales else None,
            "reference_shutter": self.reference_shutter,
            "miscalibration": (
                {str(t): a.tolist() for t, a in self.miscalibration.alpha.items()}
                if self.miscalibration else None),
            "wb_gains": list(self.wb_gains),
            "ccm": self.ccm.tolist(),
            "black_level": self.black_level,
            "white_level": self.white_level,
            "bayer_pattern": self.bayer_pattern,
            "k1": self.k1,
            "k2": self.k2,
            "iso": self.iso,
            "hdr": self.hdr,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["primitives"] = [Primitive.from_dict(p) for p in d["primitives"]]
        d["noise"] = NoiseParams(**d["noise"])
        if d.get("miscalibration"):
            d["miscalibration"] = MiscalibrationTable(
                {float(t): np.asarray(a) for t, a in d["miscalibration"].items()})
        if d.get("noise_scales"):
            d["noise_scales"] = tuple(d["noise_scales"])
        d["shutters"] = tuple(d["shutters"])
        return cls(**d)


def default_scene(**overrides):
    """Desk-scale HDR test scene: an object cluster spanning 3 orders of
    magnitude in radiance, on an empty background. The radiances are scaled
    for a well-exposed capture at the 1/15 s reference shutter."""
    overrides.setdefault("reference_shutter", 1.0 / 15.0)
    primitives = [
        Primitive("box", center=(0.0, 0.0, -0.15), size=(1.1, 0.7, 0.7),
                  color=(4.8, 3.6, 2.6)),
        Primitive("sphere", center=(0.0, 0.0, 0.45), radius=0.35,
                  color=(1.6, 4.2, 5.6)),
        Primitive("sphere", center=(0.33, -0.12, 0.62), radius=0.15,
                  color=(12.0, 9.6, 7.5)),
        Primitive("box", center=(-0.42, 0.3, 0.1), size=(0.35, 0.5, 0.9),
                  color=(0.012, 0.015, 0.02)),
        Primitive("box", center=(0.45, 0.35, -0.2), size=(0.4, 0.3, 0.4),
                  color=(5.5, 1.2, 1.4)),
    ]
    return SceneSpec(primitives=primitives, **overrides)


def ring_poses(n, radius, height, center=(0.0, 0.0, 0.0), angle_offset=0.0):
    """n cameras on a horizontal ring, all looking at the scene center."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(n):
        a = angle_offset + 2.0 * math.pi * k / n
        eye = center + np.array([radius * math.cos(a), radius * math.sin(a), height])
        poses.append(look_at_pose(eye, center))
    return poses


def hemisphere_poses(n, radius, center=(0.0, 0.0, 0.0), seed=0, min_elevation=0.15):
    """n cameras sampled on the upper hemisphere, looking at the center."""
    center = np.asarray(center, dtype=np.float64)
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(n):
        a = rng.uniform(0.0, 2.0 * math.pi)
        z = rng.uniform(min_elevation, 1.0)
        r_xy = math.sqrt(1.0 - z * z)
        eye = center + radius * np.array([r_xy * math.cos(a), r_xy * math.sin(a), z])
        poses.append(look_at_pose(eye, center))
    return poses


def sample_poses(spec, n, offset=0.0, seed=0):
    if spec.pose_kind == "ring":
        return ring_poses(n, spec.ring_radius, spec.ring_height, angle_offset=offset)
    if spec.pose_kind == "hemisphere":
        dist = math.hypot(spec.ring_radius, spec.ring_height)
        return hemisphere_poses(n, dist, seed=seed + int(offset * 1e6))
    raise ValueError(f"unknown pose sampler {spec.pose_kind!r}")


def bake_scene(spec, dtype=torch.float64):
    """Rasterize the primitives into a ground-truth voxel field (exp colors)."""
    n = spec.grid_resolution
    proto = VoxelField((n, n, n), spec.bbox, dtype=dtype)
    nodes = proto.node_positions().reshape(-1, 3)
    density = np.zeros(nodes.shape[0])
    color = np.full((nodes.shape[0], 3), 1e-8)
    # colors are painted with a ~2-voxel margin beyond the density support so
    # the log-color interpolant stays flat across the surface transition
    # (otherwise edge samples blend toward the background's log color)
    voxel = float(np.max((spec.bbox[1] - spec.bbox[0]) / max(n - 1, 1)))
    for prim in spec.primitives:  # painter's order: later primitives win
        color[prim.contains(nodes, margin=2.0 * voxel)] = np.maximum(
            np.asarray(prim.color, dtype=np.float64), 1e-8)
        density[prim.contains(nodes)] = prim.density
    # softplus^-1 for occupied nodes; -20 leaves empty space at sigma ~ 2e-9
    d = np.maximum(density, 1e-6)
    density_raw = np.where(density > 0, d + np.log1p(-np.exp(-d)), -20.0)
    return VoxelField(
        (n, n, n), spec.bbox,
        density_raw=torch.as_tensor(density_raw.reshape(n, n, n), dtype=dtype),
        color_raw=torch.as_tensor(np.log(color).reshape(n, n, n, 3), dtype=dtype),
        dtype=dtype,
    )


def _camera_for_pose(spec, pose, shutter, noise):
    size = spec.image_size
    return CameraMetadata(
        white_level=spec.white_level,
        black_level=spec.black_level,
        wb_gains=np.asarray(spec.wb_gains, dtype=np.float64),
        ccm=spec.ccm,
        shutter=shutter,
        iso=spec.iso,
        pose=pose,
        intrinsics=Intrinsics(focal=spec.focal, cx=size / 2.0, cy=size / 2.0,
                              width=size, height=size, k1=spec.k1, k2=spec.k2),
        bayer_pattern=spec.bayer_pattern,
        noise_shot=noise.shot,
        noise_read=noise.read,
    )


@dataclass
class Dataset:
    images: list                 # RawImage, training split
    test_hdr: list               # clean linear-RGB renders per unit shutter
    test_metas: list
    masks: list                  # (H, W) object masks from ground-truth opacity
    bbox: np.ndarray
    manifest: dict


def generate_dataset(spec, seed=0):
    """Render, unprocess, miscalibrate, and renoise a full training dataset."""
    gt = bake_scene(spec)
    t_ref = spec.resolve_reference_shutter()
    train_poses = sample_poses(spec, spec.n_train, seed=seed)
    test_offset = math.pi / max(spec.n_train, 1)  # between training views
    test_poses = sample_poses(spec, spec.n_test, offset=test_offset, seed=seed + 1)
    seeds = np.random.SeedSequence(seed).spawn(spec.n_train)

    images = []
    grid = list(spec.shutters)
    scales = list(spec.noise_scales) if spec.noise_scales is not None else [1.0] * len(grid)
    for i, pose in enumerate(train_poses):
        entry = grid[i % len(grid)]
        scale = scales[i % len(grid)]
        if math.isinf(entry):
            t_eff, scale = t_ref, 0.0
        else:
            t_eff = float(entry)
        params = NoiseParams(spec.noise.shot * scale, spec.noise.read * scale)
        meta = _camera_for_pose(spec, pose, t_eff, params)
        hdr, _ = render_image(gt, meta, n_samples=spec.n_samples_render)
        raw = unprocess(hdr * t_eff, meta)
        plane = raw.plane
        if spec.miscalibration is not None:
            plane = apply_miscalibration(plane, meta, spec.miscalibration)
        plane = sample_noise(plane, params, seeds[i])
        images.append(RawImage(plane, spec.bayer_pattern, meta))

    test_hdr, test_metas, masks = [], [], []
    for pose in test_poses:
        meta = _camera_for_pose(spec, pose, t_ref, NoiseParams())
        hdr, acc = render_image(gt, meta, n_samples=spec.n_samples_render)
        test_hdr.append(hdr)
        test_metas.append(meta)
        masks.append((acc > 0.5).astype(np.float64))

    manifest = {
        "format_version": 1,
        "n_train": spec.n_train,
        "n_test": spec.n_test,
        "bbox": spec.bbox.tolist(),
        "bayer_pattern": spec.bayer_pattern,
        "shutter_grid": [float(t) for t in spec.shutters],
        "reference_shutter": t_ref,
        "noise": {"shot": spec.noise.shot, "read": spec.noise.read},
        "seed": seed,
        "scene": spec.to_dict(),
    }
    return Dataset(images, test_hdr, test_metas, masks, spec.bbox.copy(), manifest)


def save_dataset(dataset, directory):
    """Layout: images/NNN.pfm, meta/NNN.json, test/NNN.pfm, test_meta/NNN.json,
    masks/NNN.pfm, dataset.json."""
    for sub in ("images", "meta", "test", "test_meta", "masks"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    for i, im in enumerate(dataset.images):
        write_pfm(os.path.join(directory, "images", f"{i:03d}.pfm"), im.plane)
        im.meta.save_json(os.path.join(directory, "meta", f"{i:03d}.json"))
    for j, (hdr, meta, mask) in enumerate(
            zip(dataset.test_hdr, dataset.test_metas, dataset.masks)):
        write_pfm(os.path.join(directory, "test", f"{j:03d}.pfm"), hdr)
        meta.save_json(os.path.join(directory, "test_meta", f"{j:03d}.json"))
        write_pfm(os.path.join(directory, "masks", f"{j:03d}.pfm"), mask)
    with open(os.path.join(directory, "dataset.json"), "w") as f:
        json.dump(dataset.manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(directory):
    with open(os.path.join(directory, "dataset.json")) as f:
        manifest = json.load(f)
    images = []
    for i in range(manifest["n_train"]):
        meta = CameraMetadata.load_json(os.path.join(directory, "meta", f"{i:03d}.json"))
        plane = read_pfm(os.path.join(directory, "images", f"{i:03d}.pfm"))
        images.append(RawImage(np.asarray(plane, dtype=np.float64),
                               manifest["bayer_pattern"], meta))
    test_hdr, test_metas, masks = [], [], []
    for j in range(manifest["n_test"]):
        test_hdr.append(np.asarray(
            read_pfm(os.path.join(directory, "test", f"{j:03d}.pfm")), dtype=np.float64))
        test_metas.append(CameraMetadata.load_json(
            os.path.join(directory, "test_meta", f"{j:03d}.json")))
        masks.append(np.asarray(
            read_pfm(os.path.join(directory, "masks", f"{j:03d}.pfm")), dtype=np.float64))
    return Dataset(images, test_hdr, test_metas, masks,
                   np.asarray(manifest["bbox"], dtype=np.float64), manifest)
