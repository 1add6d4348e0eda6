"""Config sweep on the clean condition (raw + ldr), tuning for criterion 4."""
import json
import math
import sys
import time

from rawfield.evaluation import evaluate_reconstruction
from rawfield.field import VoxelField
from rawfield.losses import LossConfig
from rawfield.synth import default_scene, generate_dataset
from rawfield.training import TrainConfig, train


def one(shutter, mode, steps, lr, s, reg, dls, seed=0, shot=1e-3, read=1e-4):
    spec = default_scene(shutters=(shutter,), n_train=20, n_test=5, image_size=64,
                         grid_resolution=64, n_samples_render=s)
    spec.noise.shot = shot
    spec.noise.read = read
    ds = generate_dataset(spec, seed=seed)
    cfg = TrainConfig(steps=steps, batch_rays=1024, n_samples=s, lr_init=lr,
                      lr_final=lr / 100, reg_weight=reg, density_lr_scale=dls,
                      seed=seed, mode=mode,
                      loss=LossConfig(variant="gradient_weighted" if mode == "raw"
                                      else "plain_l2"))
    field = VoxelField((64, 64, 64), ds.bbox,
                       color_activation="exp" if mode == "raw" else "sigmoid",
                       dtype=cfg.torch_dtype)
    t0 = time.time()
    state = train(ds.images, cfg, field)
    dt = time.time() - t0
    res = evaluate_reconstruction(state.field, ds, mode=mode, n_samples=s)
    return {"masked": res["mean"]["masked_psnr"], "psnr": res["mean"]["psnr"],
            "raw_psnr": res["mean"]["raw_psnr"], "t": dt,
            "tail": float(sum(state.loss_history[-50:]) / 50)}


if __name__ == "__main__":
    configs = [
        dict(steps=2500, lr=3e-2, s=64, reg=0.05, dls=20),
        dict(steps=2000, lr=3e-2, s=48, reg=0.05, dls=20),
        dict(steps=2000, lr=5e-2, s=48, reg=0.02, dls=20),
    ]
    for c in configs:
        for mode in ("raw", "ldr"):
            out = one(math.inf, mode, **c)
            print(json.dumps({"cfg": c, "mode": mode, **out}), flush=True)
