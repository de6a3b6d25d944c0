"""Evaluation metrics and paired-seed ablation runs."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .field import VoxelField
from .geometry import Camera, orbit_camera
from .renderer import SamplingConfig, render_image
from .trainer import TrainConfig, psnr, train

ABLATION_AXES = ("schedule", "zvar", "image-loss", "ks")


def eval_cameras(cfg: TrainConfig, n_views: int = 8, elevation_deg: float = 15.0) -> list[Camera]:
    """Evenly spaced azimuths at one elevation, offset half a step from azimuth 0.

    A run with a fixed pose (fixed target image) is evaluated at that pose only.
    """
    cam = cfg.camera
    if cam.fixed_pose is not None:
        az, el, r = cam.fixed_pose
        return [orbit_camera(math.radians(az), math.radians(el), r, cam.vertical_fov, cfg.image_size,
                             cfg.image_size)]
    return [orbit_camera(2.0 * math.pi * (k + 0.5) / n_views, math.radians(elevation_deg), cam.radius,
                         cam.vertical_fov, cfg.image_size, cfg.image_size) for k in range(n_views)]


@dataclass
class EvalReport:
    psnr: float
    latent_residual: float
    foreground_zvar: float
    foreground_fraction: float

    def as_dict(self) -> dict:
        return dict(vars(self))


def evaluate(fld: VoxelField, cfg: TrainConfig, target_fn: Callable, cameras: list[Camera] | None = None) -> EvalReport:
    """Deterministic (jitter-free) metrics averaged over evaluation views.

    ``latent_residual`` is the mean over views of ``|E(render) - z*|^2``;
    ``foreground_zvar`` averages z-variance over rays with opacity above the
    loss gate.
    """
    cameras = cameras if cameras is not None else eval_cameras(cfg)
    sampling = replace(cfg.sampling, jitter=False)
    codec = cfg.codec()
    scores, residuals, zv, fg_count, n_rays = [], [], 0.0, 0, 0
    for cam in cameras:
        result = render_image(fld, cam, sampling)
        latent, image = target_fn(cam)
        scores.append(psnr(result.image, image))
        residuals.append(float(np.sum((codec.encode(result.image) - latent) ** 2)))
        fg = result.output.opacity > cfg.loss.zvar_gate
        zv += float(result.output.zvar[fg].sum())
        fg_count += int(fg.sum())
        n_rays += fg.size
    return EvalReport(float(np.mean(scores)), float(np.mean(residuals)),
                      zv / fg_count if fg_count else 0.0, fg_count / n_rays)


def flicker(fld: VoxelField, camera: Camera, sampling: SamplingConfig, seeds) -> float:
    """Mean over pixels of the per-pixel std of composited color across sampling seeds."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("flicker needs at least one seed")
    stack = np.stack([render_image(fld, camera, sampling, np.random.default_rng(s)).image for s in seeds])
    return float(stack.std(axis=0).mean())


def flicker_pair(fld: VoxelField, camera: Camera, sampling: SamplingConfig, seeds) -> tuple[float, float]:
    """Flicker with kernel smoothing on and off, same seeds."""
    on = flicker(fld, camera, replace(sampling, kernel_smooth=True), seeds)
    off = flicker(fld, camera, replace(sampling, kernel_smooth=False), seeds)
    return on, off


def axis_variants(cfg: TrainConfig, axis: str) -> dict[str, TrainConfig]:
    """Copies of ``cfg`` that differ only along ``axis``."""
    def variant(**changes):
        c = copy.deepcopy(cfg)
        for key, value in changes.items():
            obj = c
            *path, leaf = key.split("__")
            for p in path:
                obj = getattr(obj, p)
            setattr(obj, leaf, value)
        return c

    if axis == "schedule":
        return {k: variant(anneal=k) for k in ("sqrt", "random", "linear", "cosine")}
    if axis == "zvar":
        return {"zvar_0": variant(loss__lambda_zvar=0.0), "zvar_3": variant(loss__lambda_zvar=3.0)}
    if axis == "image-loss":
        return {
            "sds_plus": variant(loss__lambda_rgb=0.1, loss__latent_loss=True),
            "latent_only": variant(loss__lambda_rgb=0.0, loss__latent_loss=True),
            "image_only": variant(loss__lambda_rgb=0.1, loss__latent_loss=False),
        }
    if axis == "ks":
        return {"ks_on": variant(sampling__kernel_smooth=True), "ks_off": variant(sampling__kernel_smooth=False)}
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def run_ablation(cfg: TrainConfig, axis: str, seeds, target_fn: Callable, field_fn: Callable[[], VoxelField] | None = None,
                 flicker_seeds: int = 16) -> dict:
    """Train every variant on every seed; returns ``{seed: {variant: metrics}}``.

    Variants sharing a seed share camera poses and noise draws. For the
    ``ks`` axis flicker is measured with the variant's own smoothing setting.
    """
    field_fn = field_fn or cfg.make_field
    results = {}
    for seed in seeds:
        row = {}
        for name, vcfg in axis_variants(cfg, axis).items():
            vcfg.seed = int(seed)
            fld, _ = train(field_fn(), vcfg, target_fn)
            metrics = evaluate(fld, vcfg, target_fn).as_dict()
            if axis == "ks":
                cam = eval_cameras(vcfg, 1)[0]
                metrics["flicker"] = flicker(fld, cam, vcfg.sampling, range(flicker_seeds))
            row[name] = metrics
        results[int(seed)] = row
    return results


def write_ablation_csv(path, results: dict) -> None:
    """Wide table: one row per (seed, metric), one column per variant."""
    first = next(iter(results.values()))
    variants = list(first)
    metrics = list(first[variants[0]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "metric", *variants])
        for seed, row in results.items():
            for m in metrics:
                w.writerow([seed, m, *(repr(float(row[v][m])) for v in variants)])
