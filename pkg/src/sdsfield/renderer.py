"""Emission-absorption volume rendering with hand-written gradients.

Per ray, with ``tau_i = sigma_i * delta_i``::

    T_i  = exp(-sum_{j<i} tau_j)
    nu_i = T_i * (1 - exp(-tau_i))
    rgb  = sum_i nu_i c_i,   opacity = sum_i nu_i
    color = rgb + (1 - opacity) * background

Depth, disparity and z-variance are moments of the normalised weights
``nu_i / opacity``. Everything is batched over a leading ray axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import composite, composite_grad
from .field import FieldGrad, FieldSample, VoxelField, merge_samples, query, query_grad
from .geometry import Camera, Rays, bin_edges, cast_rays, stratified_sample
from .sampling import DEDUP_TOL, WeightPdf, importance_sample, kernel_smooth, merge_sorted_batch

DELTA_CAP = 1e3
OPACITY_FLOOR = 1e-6


@dataclass
class RaySampleSet:
    z: np.ndarray  # (R, N) sorted positions
    sigma: np.ndarray  # (R, N)
    color: np.ndarray  # (R, N, 3)
    delta_cap: float = DELTA_CAP

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        self.color = np.asarray(self.color, dtype=np.float64).reshape(self.z.shape + (3,))
        if self.sigma.shape != self.z.shape:
            raise ValueError(f"sigma shape {self.sigma.shape} != z shape {self.z.shape}")

    @property
    def deltas(self) -> np.ndarray:
        d = np.empty_like(self.z)
        d[:, :-1] = np.diff(self.z, axis=1)
        d[:, -1] = self.delta_cap
        # a sample within the dedup tolerance of its successor is collapsed into it
        d[d <= DEDUP_TOL] = 0.0
        return d


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (R, 3) before background compositing
    color: np.ndarray  # (R, 3) composited
    opacity: np.ndarray  # (R,)
    weights: np.ndarray  # (R, N)
    transmittance: np.ndarray  # (R, N), T_i before sample i
    depth: np.ndarray  # (R,), 0 for background rays
    disparity: np.ndarray  # (R,), 0 for background rays
    zvar: np.ndarray  # (R,), 0 for background rays
    background: np.ndarray  # (R,) bool, opacity at or below the floor


def weighted_moments(z: np.ndarray, weights: np.ndarray, opacity_floor: float = OPACITY_FLOOR):
    """Mean and variance of ``z`` under ``weights / sum(weights)`` per ray.

    Rays whose total weight is at or below ``opacity_floor`` are flagged as
    background and get depth, disparity and variance 0.

    Returns:
        depth, disparity, zvar, background_mask
    """
    z = np.atleast_2d(z)
    w = np.atleast_2d(weights)
    total = w.sum(axis=1)
    bg = ~(total > opacity_floor)
    safe = np.where(bg, 1.0, total)
    # normalise first so that a single nonzero weight becomes exactly 1
    p = w / safe[:, None]
    mu = np.where(bg, 0.0, np.sum(z * p, axis=1))
    var = np.where(bg, 0.0, np.sum((z - mu[:, None]) ** 2 * p, axis=1))
    disp = np.where(bg | (mu <= 0), 0.0, 1.0 / np.where(mu > 0, mu, 1.0))
    return mu, disp, var, bg


def depth_disparity(out: RenderOutput):
    return out.depth, out.disparity


def z_variance(out: RenderOutput):
    return out.zvar


def render(samples: RaySampleSet, background, opacity_floor: float = OPACITY_FLOOR) -> RenderOutput:
    bg_color = np.asarray(background, dtype=np.float64).reshape(3)
    res = composite(samples.z, samples.sigma, samples.color, float(samples.delta_cap), DEDUP_TOL,
                    bg_color, float(opacity_floor))
    return RenderOutput(*res)


def _upstream(g, shape):
    return np.zeros(shape) if g is None else np.ascontiguousarray(np.asarray(g, dtype=np.float64).reshape(shape))


def render_grad(samples: RaySampleSet, out: RenderOutput, background, g_color=None, g_rgb=None,
                g_opacity=None, g_depth=None, g_disparity=None, g_zvar=None):
    """Backpropagate upstream gradients on render outputs to the samples.

    Any upstream argument may be None (treated as zero). Sample positions are
    constants. Depth, disparity and z-variance carry no gradient on
    background rays.

    With ``g_w`` the gradient on the weights, ``g_tau_k = g_w_k T_{k+1} -
    sum_{i>k} g_w_i nu_i`` and ``g_sigma = g_tau * delta``.

    Returns:
        (g_sigma (R, N), g_sample_color (R, N, 3), g_background (3,))
    """
    n_rays = samples.z.shape[0]
    bg_color = np.asarray(background, dtype=np.float64).reshape(3)
    return composite_grad(samples.z, samples.color, float(samples.delta_cap), DEDUP_TOL, bg_color,
                          out.weights, out.transmittance, out.opacity, out.depth, out.disparity, out.zvar,
                          out.background, _upstream(g_color, (n_rays, 3)), _upstream(g_rgb, (n_rays, 3)),
                          _upstream(g_opacity, n_rays), _upstream(g_depth, n_rays),
                          _upstream(g_disparity, n_rays), _upstream(g_zvar, n_rays))


# --- full-image two-pass pipeline ---------------------------------------------

@dataclass
class SamplingConfig:
    n_coarse: int = 32
    n_fine: int = 32
    kernel_smooth: bool = True
    kernel: tuple = (1.0, 1.0, 1.0)
    jitter: bool = True
    pdf_floor: float = 1e-5
    delta_cap: float = DELTA_CAP
    opacity_floor: float = OPACITY_FLOOR


@dataclass
class ImageRender:
    height: int
    width: int
    rays: Rays
    samples: RaySampleSet  # final merged pass
    field_samples: FieldSample  # field values behind ``samples``, flat (R * N)
    output: RenderOutput
    coarse: RenderOutput
    background_color: np.ndarray

    @property
    def image(self) -> np.ndarray:
        return self.output.color.reshape(self.height, self.width, 3)

    def map(self, name: str) -> np.ndarray:
        """One of depth, disparity, opacity, zvar as an (H, W) array."""
        return getattr(self.output, name).reshape(self.height, self.width)


def render_rays(fld: VoxelField, rays: Rays, cfg: SamplingConfig, rng: np.random.Generator | None = None):
    """Stratified coarse pass, smoothed importance resampling, final merged pass.

    The coarse pass only decides where fine samples go; it is not
    differentiated, but its field values are reused in the merged pass. Returns (final samples, merged field samples, final
    output, coarse output).
    """
    bg = fld.background
    zc = stratified_sample(rays.near, rays.far, cfg.n_coarse, rng, cfg.jitter)
    qc = query(fld, rays.points(zc).reshape(-1, 3))
    coarse = render(RaySampleSet(zc, qc.density.reshape(zc.shape), qc.color.reshape(zc.shape + (3,)),
                                 cfg.delta_cap), bg, cfg.opacity_floor)
    if cfg.n_fine <= 0:
        return RaySampleSet(zc, qc.density.reshape(zc.shape), qc.color.reshape(zc.shape + (3,)),
                            cfg.delta_cap), qc, coarse, coarse
    pdf = WeightPdf(bin_edges(rays.near, rays.far, cfg.n_coarse), coarse.weights)
    if cfg.kernel_smooth:
        pdf = kernel_smooth(pdf, cfg.kernel)
    pdf = WeightPdf(pdf.bin_edges, pdf.weights + cfg.pdf_floor)
    zf, _ = importance_sample(pdf, cfg.n_fine, rng, jitter=cfg.jitter)
    z, order, _ = merge_sorted_batch(zc, zf)
    # only the fine positions are new; coarse field values are reused
    q = merge_samples(qc, query(fld, rays.points(zf).reshape(-1, 3)), order)
    samples = RaySampleSet(z, q.density.reshape(z.shape), q.color.reshape(z.shape + (3,)), cfg.delta_cap)
    return samples, q, render(samples, bg, cfg.opacity_floor), coarse


def render_image(fld: VoxelField, camera: Camera, cfg: SamplingConfig | None = None,
                 rng: np.random.Generator | None = None) -> ImageRender:
    cfg = cfg or SamplingConfig()
    rays = cast_rays(camera, fld.bbox_min, fld.bbox_max, cfg.n_coarse)
    samples, q, out, coarse = render_rays(fld, rays, cfg, rng)
    return ImageRender(camera.image_height, camera.image_width, rays, samples, q, out, coarse, fld.background)


def image_grad(fld: VoxelField, result: ImageRender, g_color=None, g_opacity=None, g_depth=None,
               g_disparity=None, g_zvar=None, out: FieldGrad | None = None) -> FieldGrad:
    """Chain upstream gradients on an :class:`ImageRender` back to the field parameters.

    ``g_color`` may be shaped (H, W, 3) or (R, 3); per-ray gradients (R,) or (H, W).
    """
    g_sigma, g_c, g_bg = render_grad(result.samples, result.output, result.background_color,
                                     g_color=g_color, g_opacity=g_opacity, g_depth=g_depth,
                                     g_disparity=g_disparity, g_zvar=g_zvar)
    out = query_grad(fld, result.field_samples, g_sigma.reshape(-1), g_c.reshape(-1, 3), out)
    s = result.background_color
    out.background_raw += g_bg * s * (1.0 - s)
    return out
