"""Tuning harness for the noise-ablation trend experiment (not shipped)."""
import json
import math
import sys
import time

import torch

from rawfield.evaluation import evaluate_reconstruction
from rawfield.field import VoxelField
from rawfield.losses import LossConfig
from rawfield.synth import default_scene, generate_dataset
from rawfield.training import TrainConfig, train


def run(steps=1500, lr_init=2e-2, lr_final=2e-4, n_samples=48, batch=1024,
        reg=0.05, shot=1e-3, read=1e-4, seed=0, grid=(math.inf, 1/15, 1/60, 1/240)):
    results = {}
    for shutter in grid:
        t0 = time.time()
        spec = default_scene(shutters=(shutter,), n_train=20, n_test=5,
                             image_size=64, grid_resolution=64)
        spec.noise.shot = shot
        spec.noise.read = read
        ds = generate_dataset(spec, seed=seed)
        gen_t = time.time() - t0
        row = {}
        for mode in ("raw", "ldr"):
            t1 = time.time()
            cfg = TrainConfig(
                steps=steps, batch_rays=batch, n_samples=n_samples,
                lr_init=lr_init, lr_final=lr_final, reg_weight=reg,
                reg_anneal=True, seed=seed, mode=mode,
                loss=LossConfig(variant="gradient_weighted" if mode == "raw" else "plain_l2"),
            )
            field = VoxelField((64, 64, 64), ds.bbox,
                               color_activation="exp" if mode == "raw" else "sigmoid",
                               dtype=cfg.torch_dtype)
            state = train(ds.images, cfg, field)
            res = evaluate_reconstruction(state.field, ds, mode=mode)
            row[mode] = {
                "masked_psnr": res["mean"]["masked_psnr"],
                "psnr": res["mean"]["psnr"],
                "ssim": res["mean"]["ssim"],
                "raw_psnr": res["mean"]["raw_psnr"],
                "train_s": time.time() - t1,
                "loss_head": float(sum(state.loss_history[:50]) / 50),
                "loss_tail": float(sum(state.loss_history[-50:]) / 50),
            }
        results[str(shutter)] = row
        print(json.dumps({str(shutter): row}), flush=True)
        print(f"# gen {gen_t:.0f}s", flush=True)
    print("FINAL " + json.dumps(results), flush=True)


if __name__ == "__main__":
    kwargs = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kwargs[k] = float(v) if "." in v or "e" in v else int(v)
    run(**kwargs)
