"""Prototype for the exposure-calibration recovery criterion."""
import json
import sys
import time

import numpy as np

from rawfield.field import VoxelField
from rawfield.losses import LossConfig
from rawfield.noise import MiscalibrationTable, NoiseParams
from rawfield.synth import default_scene, generate_dataset
from rawfield.training import TrainConfig, train

GAINS = (0.89, 0.93, 0.75)


def run(image_size=32, grid=32, steps=1200, lr=3e-2, s=48, shot=0.0, read=0.0,
        seed=0, n_train=16):
    fast, slow = 1.0 / 60.0, 1.0 / 15.0
    spec = default_scene(
        shutters=(fast, slow), n_train=n_train, n_test=1,
        image_size=image_size, focal=1.5 * image_size, grid_resolution=grid,
        n_samples_render=s)
    spec.noise = NoiseParams(shot, read)
    spec.miscalibration = MiscalibrationTable(
        {fast: np.asarray(GAINS), slow: np.ones(3)})
    ds = generate_dataset(spec, seed=seed)
    cfg = TrainConfig(steps=steps, batch_rays=1024, n_samples=s, lr_init=lr,
                      lr_final=lr / 100, seed=seed,
                      loss=LossConfig(variant="gradient_weighted"))
    field = VoxelField((grid,) * 3, ds.bbox, dtype=cfg.torch_dtype)
    t0 = time.time()
    state = train(ds.images, cfg, field)
    dt = time.time() - t0
    cal = state.calibration
    learned = cal.alpha()[cal.index_of(fast)].detach().numpy()
    anchor = cal.alpha()[cal.index_of(slow)].detach().numpy()
    rel = np.abs(learned - np.asarray(GAINS)) / np.asarray(GAINS)
    print(json.dumps({
        "learned": learned.tolist(), "rel_err": rel.tolist(),
        "max_rel": float(rel.max()), "anchor_exact": bool((anchor == 1.0).all()),
        "t": dt, "tail": float(np.mean(state.loss_history[-50:])),
    }), flush=True)


if __name__ == "__main__":
    kwargs = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kwargs[k] = float(v) if any(c in v for c in ".e") else int(v)
    run(**kwargs)
