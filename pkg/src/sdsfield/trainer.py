"""Score-distillation optimisation loop with timestep annealing and Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np

from .diffusion import GuidedOracle, LatentCodec, NoiseSchedule, ScoreOracle, estimate_latent_multi
from .field import FieldGrad, VoxelField, init_field, save_field
from .geometry import Camera, orbit_camera
from .losses import LossBreakdown, LossConfig, total_loss
from .renderer import SamplingConfig, render_image

log = logging.getLogger(__name__)

ANNEAL_KINDS = ("sqrt", "linear", "cosine", "random")


@dataclass(frozen=True)
class AnnealSchedule:
    kind: str = "sqrt"
    t_min: float = 0.02
    t_max: float = 0.98
    total_iter: int = 10_000

    def __post_init__(self):
        if self.kind not in ANNEAL_KINDS:
            raise ValueError(f"unknown anneal kind {self.kind!r}; choose from {ANNEAL_KINDS}")
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise ValueError(f"need 0 < t_min < t_max < 1, got {self.t_min}, {self.t_max}")
        if self.total_iter < 1:
            raise ValueError("total_iter must be >= 1")


def anneal_t(schedule: AnnealSchedule, iteration: int, rng: np.random.Generator | None = None) -> float:
    """Diffusion timestep for ``iteration``; ``"random"`` draws uniformly from ``rng``."""
    if not 0 <= iteration <= schedule.total_iter:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total_iter}]")
    lo, hi = schedule.t_min, schedule.t_max
    u = iteration / schedule.total_iter
    if schedule.kind == "random":
        if rng is None:
            raise ValueError("random schedule needs an rng")
        return min(max(float(rng.uniform(lo, hi)), lo), hi)
    if schedule.kind == "sqrt":
        f = 1.0 - math.sqrt(u)
    elif schedule.kind == "linear":
        f = 1.0 - u
    else:
        f = 0.5 * (1.0 + math.cos(math.pi * u))
    # convex combination, so f = 1 gives t_max and f = 0 gives t_min exactly
    return min(max(hi * f + lo * (1.0 - f), lo), hi)


# --- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr) -> None:
    """Bias-corrected Adam update, in place. ``lr`` is a float or a dict keyed like ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --- configuration ------------------------------------------------------------

@dataclass
class CameraConfig:
    radius: float = 3.0
    vertical_fov: float = 0.6981317007977318  # 40 degrees
    elevation_min_deg: float = -30.0
    elevation_max_deg: float = 45.0
    fixed_pose: tuple | None = None  # (azimuth_deg, elevation_deg, radius)


@dataclass
class FieldConfig:
    resolution: tuple = (32, 32, 32)
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    init: str = "blob"
    blob_peak: float = 5.0
    blob_width: float = 0.4


@dataclass
class OracleConfig:
    variant: str = "target"  # "target" or "gaussian"
    guidance_scale: float = 1.0
    prior_variance: float = 0.1
    denoise_steps: int = 1
    ddim_eta: float = 1.0
    ddim_ratio: float = 0.25
    t_min: float = 0.02
    t_max: float = 0.98
    weighting: str = "sigma2"


@dataclass
class TrainConfig:
    total_iter: int = 10_000
    image_size: int = 64
    seed: int = 0
    anneal: str = "sqrt"
    lr_field: float = 1e-2
    lr_background: float = 1e-3
    grad_clip: float = 10.0
    codec_factor: int = 4
    loss: LossConfig = dc_field(default_factory=LossConfig)
    oracle: OracleConfig = dc_field(default_factory=OracleConfig)
    sampling: SamplingConfig = dc_field(default_factory=SamplingConfig)
    camera: CameraConfig = dc_field(default_factory=CameraConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def anneal_schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.anneal, self.oracle.t_min, self.oracle.t_max, max(self.total_iter, 1))

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.oracle.t_min, self.oracle.t_max, self.oracle.weighting)

    def codec(self) -> LatentCodec:
        return LatentCodec(self.codec_factor)

    def make_field(self) -> VoxelField:
        f = self.field
        return init_field(f.resolution, (f.bbox_min, f.bbox_max), f.init, f.blob_peak, f.blob_width)


# --- targets ------------------------------------------------------------------

class ReferenceTarget:
    """Target latents from deterministic renders of a reference field."""

    def __init__(self, reference: VoxelField, sampling: SamplingConfig, codec: LatentCodec):
        self.reference = reference
        self.sampling = SamplingConfig(**{**vars(sampling), "jitter": False})
        self.codec = codec

    def image(self, camera: Camera) -> np.ndarray:
        return render_image(self.reference, camera, self.sampling).image

    def __call__(self, camera: Camera):
        img = self.image(camera)
        return self.codec.encode(img), img


class ImageTarget:
    """A fixed target image, meaningful together with a fixed training pose."""

    def __init__(self, image: np.ndarray, codec: LatentCodec):
        self.image_ = np.asarray(image, dtype=np.float64)
        self.latent = codec.encode(self.image_)

    def __call__(self, camera: Camera):
        return self.latent, self.image_


def sample_camera(cfg: TrainConfig, rng: np.random.Generator) -> Camera:
    cam = cfg.camera
    if cam.fixed_pose is not None:
        az, el, r = cam.fixed_pose
        return orbit_camera(math.radians(az), math.radians(el), r, cam.vertical_fov, cfg.image_size, cfg.image_size)
    az = rng.uniform(0.0, 2.0 * math.pi)
    el = math.radians(rng.uniform(cam.elevation_min_deg, cam.elevation_max_deg))
    return orbit_camera(az, el, cam.radius, cam.vertical_fov, cfg.image_size, cfg.image_size)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return math.inf if mse == 0.0 else -10.0 * math.log10(mse)


# --- loop -----------------------------------------------------------------

@dataclass
class RunStreams:
    """Independent random streams so paired variants share poses and noise draws.

    A variant that consumes extra randomness in one stream (e.g. the random
    timestep schedule) leaves the others untouched.
    """

    pose: np.random.Generator
    timestep: np.random.Generator
    noise: np.random.Generator
    render: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunStreams":
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)))


def make_oracle(cfg: OracleConfig, target_latent: np.ndarray | None):
    prior = ScoreOracle("gaussian", prior_variance=cfg.prior_variance)
    if cfg.variant == "gaussian":
        return prior
    cond = ScoreOracle("target", target_latent=target_latent)
    return GuidedOracle(cond, prior, cfg.guidance_scale)


@dataclass
class StepRecord:
    iteration: int
    breakdown: LossBreakdown
    psnr_vs_target: float | None = None


def clip_global_norm(grads: FieldGrad, max_norm: float) -> float:
    norm = grads.global_norm()
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.as_dict().values():
            g *= scale
    return norm


def train_step(fld: VoxelField, adam: AdamState, cfg: TrainConfig, iteration: int, streams: RunStreams,
               target_fn: Callable) -> StepRecord:
    """One iteration: pose, render, noise, denoise, loss, backprop, Adam update."""
    codec = cfg.codec()
    sched = cfg.noise_schedule()
    camera = sample_camera(cfg, streams.pose)
    result = render_image(fld, camera, cfg.sampling, streams.render)
    x = result.image
    z = codec.encode(x)
    target_latent, target_image = target_fn(camera)

    t = anneal_t(cfg.anneal_schedule(), iteration, streams.timestep)
    alpha, sigma = sched.alpha_sigma(t)
    w = float(sched.weight(t))
    eps = streams.noise.standard_normal(z.shape)
    z_t = alpha * z + sigma * eps
    oracle = make_oracle(cfg.oracle, target_latent)
    z_hat = estimate_latent_multi(z_t, t, oracle, sched, cfg.oracle.denoise_steps, cfg.oracle.ddim_eta,
                                  cfg.oracle.ddim_ratio, streams.noise)
    x_hat = codec.decode(z_hat)

    breakdown, grads = total_loss(fld, result, z_hat, x_hat, t, w, cfg.loss, codec)
    for name, value in breakdown.as_dict().items():
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite {name} at iteration {iteration}")
    clip_global_norm(grads, cfg.grad_clip)
    lrs = {"density_raw": cfg.lr_field, "color_raw": cfg.lr_field, "background_raw": cfg.lr_background}
    adam_step(adam, fld.parameters(), grads.as_dict(), lrs)
    score = psnr(x, target_image) if target_image is not None else None
    return StepRecord(iteration, breakdown, score)


LOG_COLUMNS = ("iter", "t", "sds_latent", "sds_image", "zvar", "total", "psnr_vs_target")


def log_row(rec: StepRecord) -> list:
    b = rec.breakdown
    cells = [rec.iteration, b.t_used, b.sds_latent, b.sds_image, b.zvar, b.total,
             "" if rec.psnr_vs_target is None else rec.psnr_vs_target]
    return [repr(float(c)) if isinstance(c, float) else c for c in cells]


def train(fld: VoxelField, cfg: TrainConfig, target_fn: Callable, log_path=None, checkpoint_dir=None,
          checkpoint_every: int = 0, streams: RunStreams | None = None) -> tuple[VoxelField, list[StepRecord]]:
    """Run ``cfg.total_iter`` steps in place on ``fld``; returns the field and one record per step."""
    streams = RunStreams.from_seed(cfg.seed) if streams is None else streams
    adam = AdamState()
    records: list[StepRecord] = []
    writer = None
    handle = None
    if log_path is not None:
        handle = open(log_path, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(LOG_COLUMNS)
    try:
        for it in range(cfg.total_iter):
            rec = train_step(fld, adam, cfg, it, streams, target_fn)
            records.append(rec)
            if writer is not None:
                writer.writerow(log_row(rec))
            if checkpoint_dir is not None and checkpoint_every > 0 and (it + 1) % checkpoint_every == 0:
                save_field(fld, Path(checkpoint_dir) / f"step_{it + 1:06d}.sfld")
            if it % 100 == 0:
                log.debug("iter %d t=%.3f total=%.5g", it, rec.breakdown.t_used, rec.breakdown.total)
    finally:
        if handle is not None:
            handle.close()
    return fld, records
