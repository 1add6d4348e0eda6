"""Evaluation protocol for trained reconstructions against clean ground truth.

Raw-mode models render linear HDR color in camera raw space (per unit
shutter); the protocol scales both the estimate and the ground truth to the
reference exposure, affine-aligns the estimate per channel in the linear
raw domain, pushes both through the same postprocessing (shared exposure
divisor taken from the ground truth), and reports masked/unmasked sRGB
PSNR, SSIM, and Bayer-space raw PSNR. LDR-mode models output sRGB directly
and are aligned per channel in sRGB space.
"""

import json

import numpy as np

from . import metrics, pipeline
from .bayer import mosaic
from .pipeline import PipelineConfig, RawImage
from .rendering import render_image

__all__ = [
    "srgb_ground_truth",
    "evaluate_view",
    "evaluate_reconstruction",
    "report_table",
    "run_noise_ablation",
]


def srgb_ground_truth(test_hdr, meta, reference_shutter, percentile=97.0):
    """Postprocess a clean linear-RGB render to sRGB; returns (srgb, divisor).

    The exposure divisor is computed from the ground truth and reused for
    the estimates so PSNR compares images under one exposure.
    """
    cam = pipeline.unprocess_rgb(test_hdr * reference_shutter, meta)
    divisor = pipeline.exposure_divisor(
        pipeline.white_balance(cam, meta.wb_gains) @ pipeline.build_color_transform(meta.ccm).T,
        PipelineConfig(exposure_percentile=percentile),
    )
    cfg = PipelineConfig(exposure_gain=1.0 / divisor)
    return pipeline.postprocess_rgb(cam, meta, cfg), divisor


def evaluate_view(estimate, test_hdr, meta, mask, reference_shutter, mode="raw",
                  percentile=97.0):
    """Metrics row for one test view.

    estimate: raw mode - linear HDR camera-space render per unit shutter;
    ldr mode - sRGB render. Returns a dict of metric values.
    """
    gt_srgb, divisor = srgb_ground_truth(test_hdr, meta, reference_shutter, percentile)
    row = {}
    if mode == "raw":
        gt_cam = pipeline.unprocess_rgb(test_hdr * reference_shutter, meta)
        est_cam = estimate * reference_shutter
        _, est_cam = metrics.align_channels(gt_cam, est_cam)
        cfg = PipelineConfig(exposure_gain=1.0 / divisor)
        est_srgb = pipeline.postprocess_rgb(est_cam, meta, cfg)
        row["raw_psnr"] = metrics.raw_psnr(
            RawImage(mosaic(gt_cam, meta.bayer_pattern), meta.bayer_pattern, meta),
            RawImage(mosaic(est_cam, meta.bayer_pattern), meta.bayer_pattern, meta),
        )
    else:
        _, est_srgb = metrics.align_channels(gt_srgb, estimate)
        est_srgb = np.clip(est_srgb, 0.0, 1.0)
        row["raw_psnr"] = float("nan")
    row["psnr"] = metrics.psnr(gt_srgb, est_srgb)
    row["masked_psnr"] = metrics.masked_psnr(gt_srgb, est_srgb, mask)
    row["ssim"] = metrics.ssim(gt_srgb, est_srgb)
    return row


def evaluate_reconstruction(field, dataset, mode="raw", n_samples=128, percentile=97.0):
    """Render every test pose and compute the metric rows plus their mean."""
    t_ref = dataset.manifest.get("reference_shutter", 1.0)
    rows = []
    for hdr, meta, mask in zip(dataset.test_hdr, dataset.test_metas, dataset.masks):
        estimate, _ = render_image(field, meta, n_samples=n_samples)
        rows.append(evaluate_view(estimate, hdr, meta, mask, t_ref,
                                  mode=mode, percentile=percentile))
    mean_row = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return {"views": rows, "mean": mean_row}


def report_table(results, title="evaluation"):
    """Human-readable table of per-view and mean metrics."""
    keys = ["masked_psnr", "psnr", "ssim", "raw_psnr"]
    lines = [title, "view  " + "  ".join(f"{k:>12s}" for k in keys)]
    for i, row in enumerate(results["views"]):
        lines.append(f"{i:4d}  " + "  ".join(f"{row[k]:12.4f}" for k in keys))
    lines.append("mean  " + "  ".join(f"{results['mean'][k]:12.4f}" for k in keys))
    return "\n".join(lines)


def save_report(results, path):
    with open(path, "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")


def run_noise_ablation(spec_factory, train_config_factory, noise_grid, seed=0):
    """Train raw- and LDR-domain models across a noise grid and collect
    masked sRGB PSNR for each condition.

    spec_factory(shutter) -> SceneSpec for a single-shutter dataset;
    train_config_factory(mode) -> TrainConfig. noise_grid entries may be
    math.inf for the clean condition. Returns
    {shutter: {"raw": psnr, "ldr": psnr}} keyed by grid entry.
    """
    from .field import VoxelField
    from .synth import generate_dataset
    from .training import train

    results = {}
    for shutter in noise_grid:
        spec = spec_factory(shutter)
        dataset = generate_dataset(spec, seed=seed)
        per_mode = {}
        for mode in ("raw", "ldr"):
            cfg = train_config_factory(mode)
            field = VoxelField(
                (spec.grid_resolution,) * 3, spec.bbox,
                color_activation="exp" if mode == "raw" else "sigmoid",
                dtype=cfg.torch_dtype)
            state = train(dataset.images, cfg, field)
            res = evaluate_reconstruction(state.field, dataset, mode=mode)
            per_mode[mode] = res["mean"]["masked_psnr"]
        results[shutter] = per_mode
    return results
