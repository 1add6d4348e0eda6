"""Command-line workflow: simulate -> train -> render -> postprocess ->
defocus -> eval.

Configuration comes from an optional TOML file (sections: scene, train,
loss, pipeline, defocus) plus flags; flags override file values. Exit
codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

import argparse
import math
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from . import evaluation, mpi as mpi_mod, pipeline, synth
from .camera import CameraMetadata
from .checkpoint import load_checkpoint, save_checkpoint
from .field import VoxelField
from .imgio import read_pfm, write_pfm, write_png
from .losses import LossConfig
from .noise import MiscalibrationTable
from .rendering import render_image
from .training import TrainConfig, train


class ConfigError(ValueError):
    pass


_CONFIG_SECTIONS = ("scene", "train", "loss", "pipeline", "defocus")

_SCENE_KEYS = {
    "image_size", "n_train", "n_test", "focal", "ring_radius", "ring_height",
    "grid_resolution", "n_samples_render", "shutters", "noise_shot", "noise_read",
    "reference_shutter", "miscalibration", "k1", "k2", "bayer_pattern",
}
_TRAIN_KEYS = {
    "steps", "batch_rays", "n_samples", "lr_init", "lr_final", "grad_clip_norm",
    "density_lr_scale", "reg_weight", "reg_anneal", "normalize_weight_variance",
    "resolution", "border", "dtype",
}
_LOSS_KEYS = {"epsilon", "variant"}
_PIPELINE_KEYS = {"percentile", "gain", "demosaic"}
_DEFOCUS_KEYS = {"n_planes", "i_focus", "delta_r", "delta_d", "recenter"}


def load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        cfg = tomllib.load(f)
    known = {"scene": _SCENE_KEYS, "train": _TRAIN_KEYS, "loss": _LOSS_KEYS,
             "pipeline": _PIPELINE_KEYS, "defocus": _DEFOCUS_KEYS}
    for section, values in cfg.items():
        if section not in _CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(values) - known[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cfg


def pick(args_value, section, key, default):
    """Flag > config file > default."""
    if args_value is not None:
        return args_value
    if key in section:
        return section[key]
    return default


def build_scene(args, config):
    section = config.get("scene", {})
    overrides = {}
    for key in ("image_size", "n_train", "n_test", "focal", "ring_radius",
                "ring_height", "grid_resolution", "n_samples_render",
                "reference_shutter", "k1", "k2", "bayer_pattern"):
        value = pick(getattr(args, key, None), section, key, None)
        if value is not None:
            overrides[key] = value
    shutters = pick(getattr(args, "shutters", None), section, "shutters", None)
    if shutters is not None:
        overrides["shutters"] = tuple(
            math.inf if str(t) in ("inf", "Infinity") else float(t) for t in shutters)
    shot = pick(getattr(args, "noise_shot", None), section, "noise_shot", 1e-3)
    read = pick(getattr(args, "noise_read", None), section, "noise_read", 1e-4)
    from .noise import NoiseParams

    overrides["noise"] = NoiseParams(shot, read)
    spec = synth.default_scene(**overrides)
    miscal = section.get("miscalibration")
    gains = getattr(args, "miscalibrate", None)
    if gains is not None:
        fastest = min(t for t in spec.shutters if math.isfinite(t))
        longest = max(t for t in spec.shutters if math.isfinite(t))
        if fastest == longest:
            raise ConfigError("--miscalibrate needs at least two finite shutters")
        miscal = {str(fastest): list(gains), str(longest): [1.0, 1.0, 1.0]}
    if miscal:
        spec.miscalibration = MiscalibrationTable(
            {float(t): np.asarray(a, dtype=np.float64) for t, a in miscal.items()})
    return spec


def cmd_simulate(args, config):
    parent = os.path.dirname(os.path.abspath(args.out))
    if not os.path.isdir(parent):
        raise ConfigError(f"parent directory does not exist: {parent}")
    spec = build_scene(args, config)
    dataset = synth.generate_dataset(spec, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    synth.save_dataset(dataset, args.out)
    print(f"wrote dataset with {spec.n_train} train / {spec.n_test} test views to {args.out}")
    return 0


def _train_config(args, config, mode):
    tsec = config.get("train", {})
    lsec = config.get("loss", {})
    variant = pick(getattr(args, "loss", None), lsec, "variant", "gradient_weighted")
    if variant == "ldr":
        mode, variant = "ldr", "plain_l2"
    loss_cfg = LossConfig(
        epsilon=pick(args.epsilon, lsec, "epsilon", 1e-3),
        variant=variant,
        clip_grad=pick(args.grad_clip, tsec, "grad_clip_norm", 1.0),
    )
    return TrainConfig(
        steps=pick(args.steps, tsec, "steps", 2000),
        batch_rays=pick(args.batch_rays, tsec, "batch_rays", 1024),
        n_samples=pick(args.n_samples, tsec, "n_samples", 64),
        lr_init=pick(args.lr_init, tsec, "lr_init", 1e-3),
        lr_final=pick(args.lr_final, tsec, "lr_final", 1e-5),
        grad_clip_norm=pick(args.grad_clip, tsec, "grad_clip_norm", 1.0),
        density_lr_scale=pick(args.density_lr_scale, tsec, "density_lr_scale", 20.0),
        reg_weight=pick(args.reg_weight, tsec, "reg_weight", 0.05),
        reg_anneal=False if args.no_reg_anneal else pick(None, tsec, "reg_anneal", True),
        normalize_weight_variance=pick(None, tsec, "normalize_weight_variance", True),
        seed=args.seed,
        deterministic=args.deterministic,
        dtype=pick(args.dtype, tsec, "dtype", "float64"),
        border=pick(args.border, tsec, "border", 4),
        mode=mode,
        loss=loss_cfg,
    )


def cmd_train(args, config):
    dataset = synth.load_dataset(args.dataset)
    cfg = _train_config(args, config, mode="raw")
    start_step = 0
    calibration = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        field = ck["field"]
        calibration = ck["calibration"]
        start_step = ck["step"] or 0
        if ck["config"]:
            cfg = TrainConfig.from_dict(ck["config"])
            cfg.seed = args.seed
        if args.steps is not None:
            cfg.steps = args.steps
    else:
        resolution = pick(args.resolution, config.get("train", {}), "resolution", 64)
        field = VoxelField(
            (resolution,) * 3, dataset.bbox,
            color_activation="exp" if cfg.mode == "raw" else "sigmoid",
            dtype=cfg.torch_dtype)
    log_file = args.log or (args.out + ".log.jsonl")
    state = train(dataset.images, cfg, field, calibration=calibration,
                  start_step=start_step, log_file=log_file)
    save_checkpoint(args.out, state.field, state.calibration, cfg.to_dict(), state.step)
    final = state.loss_history[-1] if state.loss_history else float("nan")
    print(f"trained {state.step} steps (final loss {final:.6g}); checkpoint at {args.out}")
    return 0


def cmd_render(args, config):
    ck = load_checkpoint(args.checkpoint)
    if args.meta:
        metas = [CameraMetadata.load_json(p) for p in args.meta]
    else:
        dataset = synth.load_dataset(args.dataset)
        if args.split == "test":
            metas = dataset.test_metas
        else:
            metas = [im.meta for im in dataset.images]
    os.makedirs(args.out, exist_ok=True)
    for i, meta in enumerate(metas):
        img, _ = render_image(ck["field"], meta, n_samples=args.n_samples)
        path = os.path.join(args.out, f"render_{i:03d}.pfm")
        write_pfm(path, img)
    print(f"rendered {len(metas)} views to {args.out}")
    return 0


def cmd_postprocess(args, config):
    psec = config.get("pipeline", {})
    percentile = pick(args.percentile, psec, "percentile", 97.0)
    gain = pick(args.gain, psec, "gain", None)
    demosaic = pick(None, psec, "demosaic", not args.no_demosaic)
    cfg = pipeline.PipelineConfig(exposure_percentile=percentile,
                                  apply_demosaic=demosaic, exposure_gain=gain)
    img = read_pfm(args.input).astype(np.float64)
    meta = CameraMetadata.load_json(args.meta)
    if img.ndim == 2:
        raw = pipeline.RawImage(img, meta.bayer_pattern, meta)
        srgb = pipeline.postprocess(raw, cfg)
    else:
        srgb = pipeline.postprocess_rgb(img * args.shutter, meta, cfg)
    write_png(args.out, srgb)
    print(f"wrote {args.out}")
    return 0


def cmd_defocus(args, config):
    dsec = config.get("defocus", {})
    n_planes = pick(args.n_planes, dsec, "n_planes", 32)
    i_focus = pick(args.i_focus, dsec, "i_focus", n_planes // 2)
    delta_r = pick(args.delta_r, dsec, "delta_r", 0.25)
    delta_d = pick(args.delta_d, dsec, "delta_d", (0.0, 0.0))
    recenter = pick(None, dsec, "recenter", args.recenter)
    if args.mpi:
        stack = mpi_mod.load_mpi(args.mpi)
    else:
        ck = load_checkpoint(args.checkpoint)
        meta = CameraMetadata.load_json(args.meta)
        stack = mpi_mod.extract_mpi(ck["field"], meta, n_planes)
    if args.save_mpi:
        mpi_mod.save_mpi(args.save_mpi, stack)
    params = mpi_mod.DefocusParams(i_focus=i_focus, delta_r=delta_r,
                                   delta_d=tuple(delta_d), recenter_translation=recenter)
    img = mpi_mod.defocus(stack, params)
    write_pfm(args.out, img)
    print(f"wrote defocused HDR image to {args.out}")
    return 0


def cmd_eval(args, config):
    ck = load_checkpoint(args.checkpoint)
    dataset = synth.load_dataset(args.dataset)
    mode = args.mode
    if mode is None:
        mode = "ldr" if ck["field"].color_activation == "sigmoid" else "raw"
    results = evaluation.evaluate_reconstruction(
        ck["field"], dataset, mode=mode, n_samples=args.n_samples)
    print(evaluation.report_table(results, title=f"eval ({mode}) vs {args.dataset}"))
    if args.out:
        evaluation.save_report(results, args.out)
        print(f"wrote {args.out}")
    return 0


def build_parser():
    # global flags are accepted both before and after the subcommand; the
    # SUPPRESS default keeps the subparser from clobbering a value parsed
    # by the outer parser
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(
        prog="rawfield",
        description="Raw-domain HDR volumetric reconstruction workflow",
        parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic raw dataset",
                       parents=[common])
    p.add_argument("--out", required=True)
    for key, typ in (("image_size", int), ("n_train", int), ("n_test", int),
                     ("focal", float), ("ring_radius", float), ("ring_height", float),
                     ("grid_resolution", int), ("n_samples_render", int),
                     ("reference_shutter", float), ("k1", float), ("k2", float),
                     ("noise_shot", float), ("noise_read", float)):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ)
    p.add_argument("--bayer-pattern", dest="bayer_pattern")
    p.add_argument("--shutters", nargs="+", help="grid entries; 'inf' = clean")
    p.add_argument("--miscalibrate", nargs=3, type=float, metavar=("R", "G", "B"),
                   help="inject per-channel gains at the fastest shutter")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="optimize a scene on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=["gradient_weighted", "tonemapped", "plain_l2", "ldr"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-rays", dest="batch_rays", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--lr-init", dest="lr_init", type=float)
    p.add_argument("--lr-final", dest="lr_final", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--density-lr-scale", dest="density_lr_scale", type=float)
    p.add_argument("--reg-weight", dest="reg_weight", type=float)
    p.add_argument("--no-reg-anneal", action="store_true")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--border", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--log")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--meta", nargs="+", help="camera JSON files instead of a dataset")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=128)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("postprocess", parents=[common], help="raw/HDR PFM -> sRGB PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float)
    p.add_argument("--gain", type=float)
    p.add_argument("--shutter", type=float, default=1.0,
                   help="exposure scale applied to 3-channel HDR inputs")
    p.add_argument("--no-demosaic", action="store_true")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("defocus", parents=[common], help="synthetic defocus via an MPI")
    p.add_argument("--checkpoint")
    p.add_argument("--meta")
    p.add_argument("--mpi", help="reuse a saved MPI directory")
    p.add_argument("--save-mpi", dest="save_mpi")
    p.add_argument("--out", required=True)
    p.add_argument("--n-planes", dest="n_planes", type=int)
    p.add_argument("--i-focus", dest="i_focus", type=int)
    p.add_argument("--delta-r", dest="delta_r", type=float)
    p.add_argument("--delta-d", dest="delta_d", nargs=2, type=float)
    p.add_argument("--recenter", action="store_true")
    p.set_defaults(func=cmd_defocus)

    p = sub.add_parser("eval", parents=[common], help="metrics against the clean test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--mode", choices=["raw", "ldr"])
    p.add_argument("--n-samples", dest="n_samples", type=int, default=128)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", 0), ("deterministic", True),
                          ("threads", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        config = load_config(args.config)
        if args.threads is not None:
            import torch

            torch.set_num_threads(args.threads)
        if args.command == "defocus" and not (args.mpi or (args.checkpoint and args.meta)):
            raise ConfigError("defocus needs either --mpi or --checkpoint with --meta")
        if args.command == "render" and not (args.meta or args.dataset):
            raise ConfigError("render needs --dataset or --meta")
        return args.func(args, config)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
