"""Command-line entry point: fit, render, eval-flicker, ablate.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import OUTPUT_ROOT_ENV, ConfigError, RunConfig, dump_config, load_config
from .experiments import ABLATION_AXES, eval_cameras, evaluate, flicker, run_ablation, write_ablation_csv
from .field import CheckpointError, load_field, save_field
from .geometry import orbit_camera
from .images import read_image, write_aux_maps, write_png, write_ppm
from .renderer import SamplingConfig, render_image
from .scenes import make_scene
from .trainer import ImageTarget, ReferenceTarget, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("sdsfield")


def parse_pose(text: str) -> tuple[float, float, float]:
    """``"az,el,r"`` in degrees, degrees, scene units."""
    try:
        az, el, r = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pose must be az,el,r (got {text!r})") from None
    if r <= 0:
        raise argparse.ArgumentTypeError("pose radius must be positive")
    return az, el, r


def parse_taps(text: str) -> tuple[float, ...]:
    try:
        taps = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"kernel taps must be comma-separated numbers (got {text!r})") from None
    if len(taps) % 2 == 0 or min(taps) < 0 or sum(taps) <= 0:
        raise argparse.ArgumentTypeError("kernel needs an odd number of non-negative taps with positive sum")
    return taps


def parse_seeds(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def _sampling_overrides(sampling: SamplingConfig, args) -> SamplingConfig:
    if getattr(args, "kernel_taps", None) is not None:
        sampling = replace(sampling, kernel=args.kernel_taps)
    if getattr(args, "no_kernel_smooth", False):
        sampling = replace(sampling, kernel_smooth=False)
    return sampling


def _apply_run_overrides(run: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        run.train.seed = args.seed
    if getattr(args, "total_iter", None) is not None:
        run.train.total_iter = args.total_iter
    if getattr(args, "output", None) is not None:
        run.output.dir = str(args.output)
    run.train.sampling = _sampling_overrides(run.train.sampling, args)
    return run


def make_target(run: RunConfig):
    cfg = run.train
    path = run.target_image_path()
    if path is not None:
        image = read_image(path)
        if image.shape[:2] != (cfg.image_size, cfg.image_size):
            raise ConfigError(f"target.image: {path} is {image.shape[1]}x{image.shape[0]}, "
                              f"expected {cfg.image_size}x{cfg.image_size}", run.source)
        return ImageTarget(image, cfg.codec())
    return ReferenceTarget(make_scene(run.target.scene, run.target.resolution), cfg.sampling, cfg.codec())


# --- commands -----------------------------------------------------------------

def cmd_fit(args) -> int:
    run = _apply_run_overrides(load_config(args.config), args)
    cfg = run.train
    target = make_target(run)
    out = run.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(run))
    ckpt_dir = out / "checkpoints"
    if run.output.checkpoint_every:
        ckpt_dir.mkdir(exist_ok=True)
    fld, records = train(cfg.make_field(), cfg, target, log_path=out / "train_log.csv",
                         checkpoint_dir=ckpt_dir, checkpoint_every=run.output.checkpoint_every)
    save_field(fld, out / "field.sfld")
    previews = out / "previews"
    previews.mkdir(exist_ok=True)
    sampling = replace(cfg.sampling, jitter=False)
    for k, cam in enumerate(eval_cameras(cfg, run.output.preview_views) if run.output.preview_views else []):
        write_png(previews / f"view_{k:03d}.png", render_image(fld, cam, sampling).image)
    summary = {"iterations": len(records), **evaluate(fld, cfg, target).as_dict()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({"output_dir": str(out), **summary}))
    return EXIT_OK


def _render_poses(args) -> list[tuple[float, float, float]]:
    if args.pose is not None:
        return [args.pose]
    n = args.orbit if args.orbit is not None else 1
    return [(360.0 * k / n, args.elevation, args.radius) for k in range(n)]


def _default_output(kind: str, ckpt: Path) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    return root / kind / ckpt.stem


def cmd_render(args) -> int:
    fld = load_field(args.checkpoint)
    out = Path(args.out) if args.out else _default_output("renders", Path(args.checkpoint))
    out.mkdir(parents=True, exist_ok=True)
    sampling = _sampling_overrides(SamplingConfig(jitter=args.seed is not None), args)
    for k, (az, el, r) in enumerate(_render_poses(args)):
        cam = orbit_camera(math.radians(az), math.radians(el), r, width=args.size, height=args.size)
        rng = np.random.default_rng(args.seed) if args.seed is not None else None
        result = render_image(fld, cam, sampling, rng)
        stem = out / f"view_{k:03d}"
        if args.format == "ppm":
            write_ppm(stem.with_suffix(".ppm"), result.image)
        else:
            write_png(stem.with_suffix(".png"), result.image)
        if args.aux:
            write_aux_maps(stem, {name: result.map(name) for name in ("depth", "disparity", "opacity", "zvar")})
        print(f"{stem.name}: azimuth={az:g} elevation={el:g} radius={r:g}")
    return EXIT_OK


def cmd_eval_flicker(args) -> int:
    fld = load_field(args.checkpoint)
    az, el, r = args.pose
    cam = orbit_camera(math.radians(az), math.radians(el), r, width=args.size, height=args.size)
    sampling = _sampling_overrides(SamplingConfig(jitter=not args.no_jitter), args)
    seeds = range(args.seed, args.seed + args.seeds)
    report = {"seeds": args.seeds, "pose": [az, el, r]}
    if args.no_kernel_smooth:
        report["std_ks_off"] = flicker(fld, cam, replace(sampling, kernel_smooth=False), seeds)
    else:
        on = flicker(fld, cam, replace(sampling, kernel_smooth=True), seeds)
        off = flicker(fld, cam, replace(sampling, kernel_smooth=False), seeds)
        report.update(std_ks_on=on, std_ks_off=off, ratio=(on / off) if off > 0 else None)
    print(json.dumps(report))
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _apply_run_overrides(load_config(args.config), args)
    target = make_target(run)
    out = run.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(run))
    results = run_ablation(run.train, args.axis, args.seeds, target, flicker_seeds=args.flicker_seeds)
    path = Path(args.csv) if args.csv else out / f"ablation_{args.axis}.csv"
    write_ablation_csv(path, results)
    print(path.read_text(), end="")
    return EXIT_OK


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdsfield", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def sampling_flags(sp):
        sp.add_argument("--kernel-taps", type=parse_taps, help="comma-separated smoothing taps, e.g. 1,2,1")
        sp.add_argument("--no-kernel-smooth", action="store_true", help="disable coarse-pdf smoothing")

    fit = sub.add_parser("fit", help="optimise a field against the configured oracle")
    fit.add_argument("config")
    fit.add_argument("--seed", type=int)
    fit.add_argument("--total-iter", type=int)
    fit.add_argument("--output", help="output directory (overrides output.dir)")
    sampling_flags(fit)
    fit.set_defaults(func=cmd_fit)

    ren = sub.add_parser("render", help="render a checkpoint")
    ren.add_argument("checkpoint")
    poses = ren.add_mutually_exclusive_group()
    poses.add_argument("--orbit", type=int, metavar="N", help="N views at equal azimuth steps")
    poses.add_argument("--pose", type=parse_pose, metavar="AZ,EL,R", help="single pose in degrees")
    ren.add_argument("--elevation", type=float, default=15.0, help="orbit elevation in degrees")
    ren.add_argument("--radius", type=float, default=3.0)
    ren.add_argument("--size", type=int, default=64)
    ren.add_argument("--aux", action="store_true", help="also write depth/disparity/opacity/zvar maps")
    ren.add_argument("--seed", type=int, help="jitter samples with this seed (default: deterministic midpoints)")
    ren.add_argument("--format", choices=("png", "ppm"), default="png")
    ren.add_argument("--out", help="output directory")
    sampling_flags(ren)
    ren.set_defaults(func=cmd_render)

    fl = sub.add_parser("eval-flicker", help="per-pixel std across sampling seeds")
    fl.add_argument("checkpoint")
    fl.add_argument("--seeds", type=int, required=True)
    fl.add_argument("--seed", type=int, default=0, help="first sampling seed")
    fl.add_argument("--pose", type=parse_pose, default=(30.0, 15.0, 3.0), metavar="AZ,EL,R")
    fl.add_argument("--size", type=int, default=64)
    fl.add_argument("--no-jitter", action="store_true", help="deterministic sampling (std is then 0)")
    sampling_flags(fl)
    fl.set_defaults(func=cmd_eval_flicker)

    ab = sub.add_parser("ablate", help="paired-seed variants along one axis")
    ab.add_argument("config")
    ab.add_argument("--axis", choices=ABLATION_AXES, required=True)
    ab.add_argument("--seeds", type=parse_seeds, default=[0, 1, 2, 3, 4], help="comma-separated seeds")
    ab.add_argument("--total-iter", type=int)
    ab.add_argument("--flicker-seeds", type=int, default=16)
    ab.add_argument("--output", help="output directory (overrides output.dir)")
    ab.add_argument("--csv", help="CSV path (default: <output>/ablation_<axis>.csv)")
    sampling_flags(ab)
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "seeds", None) is not None and isinstance(args.seeds, int) and args.seeds < 1:
        parser.error("--seeds must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint format error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
