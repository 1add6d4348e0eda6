"""Optimization loop: Adam over grid and calibration parameters, random ray
batches across all training images, exponential lr decay, global gradient
clipping, and the annealed weight-variance regularizer.

Two modes share the loop: "raw" trains on mosaicked raw planes with the
Bayer-masked exposure-scaled loss and an exp color activation; "ldr" (the
ablation path) postprocesses the inputs to sRGB and trains a sigmoid-color
field with a plain L2 loss on all three channels.
"""

import json
import math
from dataclasses import dataclass, field as dataclass_field, asdict

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import bayer, pipeline
from .camera import generate_rays
from .field import VoxelField
from .losses import ExposureCalibration, LossConfig, LossVariant, bayer_masked_loss
from .rendering import ray_aabb_intersect, render_rays, weight_variance

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingDivergedError",
    "lr_schedule",
    "clip_gradients",
    "train",
    "SceneReconstructor",
]

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_rays: int = 1024
    n_samples: int = 64
    lr_init: float = 1e-3
    lr_final: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    density_lr_scale: float = 20.0  # density moves ~linearly through softplus,
                                    # so it needs a far larger step than log-color
    reg_weight: float = 0.05
    reg_anneal: bool = True
    normalize_weight_variance: bool = True
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float64"
    border: int = 4
    mode: str = "raw"
    loss: LossConfig = dataclass_field(default_factory=LossConfig)

    def __post_init__(self):
        if not (self.lr_init >= self.lr_final > 0):
            raise ValueError(f"need lr_init >= lr_final > 0, got {self.lr_init}, {self.lr_final}")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.mode not in ("raw", "ldr"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {list(_DTYPES)}")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self):
        d = asdict(self)
        d["loss"]["variant"] = self.loss.variant.value
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


@dataclass
class TrainState:
    field: VoxelField
    calibration: ExposureCalibration | None
    config: TrainConfig
    step: int = 0
    loss_history: list = dataclass_field(default_factory=list)
    optimizer: object = None


def lr_schedule(step, cfg):
    """Exponential decay with lr(0) = lr_init and lr(steps) = lr_final."""
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if cfg.steps == 0 or cfg.lr_init == cfg.lr_final:
        return cfg.lr_init
    return cfg.lr_init * (cfg.lr_final / cfg.lr_init) ** (step / cfg.steps)


def clip_gradients(grads, max_norm):
    """Scale gradients in place so the global L2 norm is at most max_norm.

    Returns (grads, pre_clip_norm).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        with torch.no_grad():
            for g in grads:
                g.mul_(scale)
    return grads, total


def regularizer_weight(step, cfg):
    """Annealed weight: linear ramp 0 -> reg_weight over the first half."""
    if not cfg.reg_anneal or cfg.steps == 0:
        return cfg.reg_weight
    half = max(1, cfg.steps // 2)
    return cfg.reg_weight * min(1.0, step / half)


def _prepare_images(images, cfg):
    """Precompute per-image ray grids, bounds, and supervision tensors."""
    if not images:
        raise ValueError("need at least one training image")
    dtype = cfg.torch_dtype
    patterns = {im.bayer_pattern for im in images}
    if cfg.mode == "raw" and len(patterns) != 1:
        raise ValueError(f"inconsistent bayer patterns in dataset: {patterns}")
    sizes = {(im.meta.intrinsics.height, im.meta.intrinsics.width) for im in images}
    if len(sizes) != 1:
        raise ValueError(f"all training images must share a size, got {sizes}")
    h, w = sizes.pop()
    for i, im in enumerate(images):
        if im.plane.shape[:2] != (h, w):
            raise ValueError(
                f"image {i} plane shape {im.plane.shape} disagrees with its "
                f"intrinsics ({h}x{w})")
    if h <= 2 * cfg.border or w <= 2 * cfg.border:
        raise ValueError(f"border {cfg.border} leaves no trainable pixels in {h}x{w} images")

    vs, us = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([us.ravel() + 0.5, vs.ravel() + 0.5], axis=-1)
    dirs, bounds_list, origins, targets, cmaps = [], [], [], [], []
    for im in images:
        o, d = generate_rays(im.meta, pix)
        dirs.append(torch.as_tensor(d.reshape(h, w, 3), dtype=dtype))
        origins.append(torch.as_tensor(o[0], dtype=dtype))
        if cfg.mode == "raw":
            targets.append(torch.as_tensor(im.plane, dtype=dtype))
            cmaps.append(torch.as_tensor(
                bayer.channel_map(im.bayer_pattern, h, w), dtype=torch.long))
        else:
            srgb = pipeline.postprocess(im)
            targets.append(torch.as_tensor(srgb, dtype=dtype))
    return {
        "h": h,
        "w": w,
        "dirs": torch.stack(dirs),                      # (n, H, W, 3)
        "origins": torch.stack(origins),                # (n, 3)
        "targets": torch.stack(targets),                # (n, H, W[, 3])
        "cmaps": torch.stack(cmaps) if cmaps else None,  # (n, H, W)
        "shutters": torch.tensor([im.meta.shutter for im in images], dtype=dtype),
    }


def train(images, cfg, field, calibration=None, start_step=0, log_file=None):
    """Optimize the field (and exposure calibration, in raw mode) on a dataset.

    images: list of RawImage. Returns a TrainState; with steps == start_step
    the state is returned unchanged. Deterministic given (images, cfg, seed)
    when cfg.deterministic is set.
    """
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    dtype = cfg.torch_dtype
    prep = _prepare_images(images, cfg)
    if cfg.mode == "raw" and calibration is None:
        calibration = ExposureCalibration(prep["shutters"].tolist(), dtype=dtype)
    if cfg.mode == "ldr":
        calibration = None

    params = field.parameters()
    if calibration is not None:
        params = params + calibration.parameters()
    groups = [
        {"params": [field.density_raw], "lr_scale": cfg.density_lr_scale},
        {"params": [p for p in params if p is not field.density_raw], "lr_scale": 1.0},
    ]
    optimizer = torch.optim.Adam(
        groups, lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    state = TrainState(field, calibration, cfg, step=start_step, optimizer=optimizer)

    rng = torch.Generator()
    rng.manual_seed(cfg.seed)
    lo = torch.as_tensor(field.bbox[0], dtype=dtype)
    hi = torch.as_tensor(field.bbox[1], dtype=dtype)
    shutter_idx = None
    if calibration is not None:
        shutter_idx = torch.tensor(
            [calibration.index_of(float(t)) for t in prep["shutters"]], dtype=torch.long)

    n_images = prep["dirs"].shape[0]
    b = cfg.border
    log_fh = open(log_file, "w") if log_file is not None else None
    try:
        for step in range(start_step, cfg.steps):
            lr = lr_schedule(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr * group["lr_scale"]
            lam = regularizer_weight(step, cfg)

            img = torch.randint(0, n_images, (cfg.batch_rays,), generator=rng)
            vi = torch.randint(b, prep["h"] - b, (cfg.batch_rays,), generator=rng)
            ui = torch.randint(b, prep["w"] - b, (cfg.batch_rays,), generator=rng)
            origins = prep["origins"][img]
            dirs = prep["dirs"][img, vi, ui]
            t_near, t_far = ray_aabb_intersect(origins, dirs, lo, hi)
            result = render_rays(field, origins, dirs, cfg.n_samples,
                                 t_bounds=torch.stack([t_near, t_far], dim=-1), generator=rng)

            if cfg.mode == "raw":
                y = prep["targets"][img, vi, ui]
                channels = prep["cmaps"][img, vi, ui]
                per_ray = bayer_masked_loss(
                    result.color, y, channels, cfg.loss,
                    calibration=calibration,
                    shutter=prep["shutters"][img],
                    shutter_index=shutter_idx[img],
                )
                render_loss = per_ray.mean()
            else:
                y = prep["targets"][img, vi, ui]
                render_loss = (result.color - y).pow(2).mean()

            if cfg.normalize_weight_variance:
                reg = result.sum_weights * weight_variance(result.weights, result.boundaries)
            else:
                reg = weight_variance(result.weights, result.boundaries, normalize=False)
            loss = render_loss + lam * reg.mean()

            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: render={float(render_loss.detach()):g} "
                    f"reg={float(reg.mean().detach()):g} "
                    f"y[min={float(y.min()):g}, max={float(y.max()):g}]"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            grads = [p.grad for p in params if p.grad is not None]
            clip_gradients(grads, cfg.grad_clip_norm)
            optimizer.step()

            state.loss_history.append(loss_val)
            state.step = step + 1
            if log_fh is not None:
                log_fh.write(json.dumps(
                    {"step": step, "loss": loss_val, "lr": lr, "lambda_w": lam}) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


class SceneReconstructor(BaseEstimator):
    """sklearn-style estimator: fit a voxel scene to raw captures, predict views.

    fit(X) takes a list of RawImage (X may also be a synth.Dataset, in which
    case its training images and bbox are used). predict(X) takes camera
    metadata objects and returns rendered images: linear HDR color per unit
    shutter in raw mode, sRGB in ldr mode.
    """

    def __init__(self, resolution=64, bbox=None, steps=2000, batch_rays=1024,
                 n_samples=64, lr_init=1e-3, lr_final=1e-5, grad_clip_norm=1.0,
                 density_lr_scale=20.0, reg_weight=0.05, reg_anneal=True,
                 normalize_weight_variance=True, epsilon=1e-3,
                 loss_variant="gradient_weighted", mode="raw",
                 seed=0, deterministic=True, dtype="float64", border=4):
        self.resolution = resolution
        self.bbox = bbox
        self.steps = steps
        self.batch_rays = batch_rays
        self.n_samples = n_samples
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.grad_clip_norm = grad_clip_norm
        self.density_lr_scale = density_lr_scale
        self.reg_weight = reg_weight
        self.reg_anneal = reg_anneal
        self.normalize_weight_variance = normalize_weight_variance
        self.epsilon = epsilon
        self.loss_variant = loss_variant
        self.mode = mode
        self.seed = seed
        self.deterministic = deterministic
        self.dtype = dtype
        self.border = border

    def _train_config(self):
        return TrainConfig(
            steps=self.steps, batch_rays=self.batch_rays, n_samples=self.n_samples,
            lr_init=self.lr_init, lr_final=self.lr_final,
            grad_clip_norm=self.grad_clip_norm, density_lr_scale=self.density_lr_scale,
            reg_weight=self.reg_weight, reg_anneal=self.reg_anneal,
            normalize_weight_variance=self.normalize_weight_variance,
            seed=self.seed, deterministic=self.deterministic, dtype=self.dtype,
            border=self.border, mode=self.mode,
            loss=LossConfig(epsilon=self.epsilon, variant=LossVariant(self.loss_variant)),
        )

    def fit(self, X, y=None):
        images = X
        bbox = self.bbox
        if hasattr(X, "images"):  # synth.Dataset
            images = X.images
            if bbox is None:
                bbox = X.bbox
        if bbox is None:
            raise ValueError("bbox is required (pass bbox= or fit on a Dataset)")
        cfg = self._train_config()
        res = self.resolution
        if np.isscalar(res):
            res = (res, res, res)
        field = VoxelField(
            res, bbox, color_activation="exp" if self.mode == "raw" else "sigmoid",
            dtype=cfg.torch_dtype)
        self.state_ = train(images, cfg, field)
        self.field_ = self.state_.field
        self.calibration_ = self.state_.calibration
        return self

    def predict(self, X, n_samples=None):
        from .rendering import render_image

        if not hasattr(self, "field_"):
            raise RuntimeError("SceneReconstructor is not fitted")
        metas = X if isinstance(X, (list, tuple)) else [X]
        n = n_samples or max(self.n_samples, 128)
        renders = [render_image(self.field_, m, n_samples=n)[0] for m in metas]
        return renders if isinstance(X, (list, tuple)) else renders[0]
