"""Analytic stand-ins for a latent diffusion model.

* a continuous variance-preserving cosine schedule,
* a block-average / nearest-upsample latent codec,
* closed-form noise predictors ("oracles") whose clean-latent estimate is
  known exactly,
* single-step and DDIM multi-step clean-latent estimation.

Nothing here is differentiated; clean estimates are constants for the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_MIN = 0.02
T_MAX = 0.98


@dataclass(frozen=True)
class NoiseSchedule:
    t_min: float = T_MIN
    t_max: float = T_MAX
    weighting: str = "sigma2"  # "sigma2" -> w(t) = sigma_t**2, "uniform" -> w(t) = 1

    def __post_init__(self):
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise ValueError(f"need 0 < t_min < t_max < 1, got {self.t_min}, {self.t_max}")
        if self.weighting not in ("sigma2", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def alpha_sigma(self, t):
        """``(cos(pi t / 2), sin(pi t / 2))``. No range check; see :func:`schedule_at`."""
        return np.cos(0.5 * np.pi * t), np.sin(0.5 * np.pi * t)

    def weight(self, t):
        if self.weighting == "uniform":
            return np.ones_like(np.asarray(t, dtype=np.float64))[()]
        return self.alpha_sigma(t)[1] ** 2


def schedule_at(sched: NoiseSchedule, t: float):
    """Return ``(alpha_t, sigma_t, w(t))``; ``t`` must lie in ``[t_min, t_max]``."""
    if not sched.t_min <= t <= sched.t_max:
        raise ValueError(f"t={t} outside schedule range [{sched.t_min}, {sched.t_max}]")
    a, s = sched.alpha_sigma(t)
    return float(a), float(s), float(sched.weight(t))


def add_noise(z, alpha: float, sigma: float, eps):
    return alpha * np.asarray(z) + sigma * np.asarray(eps)


def estimate_latent_single(z_t, eps_hat, alpha: float, sigma: float):
    """Clean-latent estimate ``(z_t - sigma * eps_hat) / alpha``."""
    return (np.asarray(z_t) - sigma * np.asarray(eps_hat)) / alpha


# --- latent codec -------------------------------------------------------------

@dataclass(frozen=True)
class LatentCodec:
    factor: int = 4

    def _check(self, h: int, w: int):
        if h % self.factor or w % self.factor:
            raise ValueError(f"image size {h}x{w} not divisible by codec factor {self.factor}")

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(H, W, C) image -> (H/f, W/f, C) latent of block means."""
        h, w, c = image.shape
        self._check(h, w)
        f = self.factor
        return image.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        f = self.factor
        return np.repeat(np.repeat(latent, f, axis=0), f, axis=1)

    def encode_adjoint(self, g_latent: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`encode`: each latent gradient spread as g / f**2 over its block."""
        return self.decode(g_latent) / self.factor ** 2


def encode(image, codec: LatentCodec = LatentCodec()):
    return codec.encode(image)


def decode(latent, codec: LatentCodec = LatentCodec()):
    return codec.decode(latent)


# --- oracles --------------------------------------------------------------

@dataclass
class ScoreOracle:
    """Closed-form noise predictor.

    ``"target"`` predicts the noise that maps ``z_t`` back onto
    ``target_latent``; ``"gaussian"`` is the exact score of a zero-mean
    isotropic Gaussian data distribution with variance ``prior_variance``.
    ``conditioning`` is a free-form tag carried for bookkeeping only.
    """

    variant: str = "target"
    target_latent: np.ndarray | None = None
    prior_variance: float = 1.0
    conditioning: str = ""

    def __post_init__(self):
        if self.variant not in ("target", "gaussian"):
            raise ValueError(f"unknown oracle variant {self.variant!r}")
        if self.variant == "target" and self.target_latent is None:
            raise ValueError("target oracle needs target_latent")

    def eps(self, z_t, alpha: float, sigma: float):
        z_t = np.asarray(z_t, dtype=np.float64)
        if self.variant == "target":
            return (z_t - alpha * self.target_latent) / sigma
        return sigma * z_t / (alpha ** 2 * self.prior_variance + sigma ** 2)


def oracle_eps(oracle: ScoreOracle, z_t, t: float, sched: NoiseSchedule):
    a, s, _ = schedule_at(sched, t)
    return oracle.eps(z_t, a, s)


def cfg_blend(eps_cond, eps_uncond, scale: float):
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass
class GuidedOracle:
    """Classifier-free guidance over a conditional and an unconditional oracle."""

    cond: ScoreOracle
    uncond: ScoreOracle
    scale: float = 1.0

    def eps(self, z_t, alpha: float, sigma: float):
        if self.scale == 1.0:
            return self.cond.eps(z_t, alpha, sigma)
        return cfg_blend(self.cond.eps(z_t, alpha, sigma), self.uncond.eps(z_t, alpha, sigma), self.scale)


def timestep_ladder(t: float, steps: int, ratio: float, t_min: float) -> list[float]:
    """``[t, r t, r^2 t, ...]`` of length ``steps``, clamped below at ``t_min``."""
    return [max(t * ratio ** k, t_min) if k else t for k in range(steps)]


def estimate_latent_multi(z_t, t: float, oracle, sched: NoiseSchedule, steps: int = 1, eta: float = 1.0,
                          ratio: float = 0.25, rng: np.random.Generator | None = None):
    """DDIM denoising of ``z_t`` down a geometric timestep ladder, then a final clean estimate.

    ``steps=1`` is exactly the single-step estimate. Each intermediate step
    moves from ``t_k`` to ``t_{k+1}`` with the DDIM update; ``eta`` scales the
    injected noise (0 is deterministic) and fresh noise is drawn per step.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    ladder = timestep_ladder(t, steps, ratio, sched.t_min)
    z = np.asarray(z_t, dtype=np.float64)
    for k, tk in enumerate(ladder):
        a, s = sched.alpha_sigma(tk)
        eps_hat = oracle.eps(z, a, s)
        x0 = estimate_latent_single(z, eps_hat, a, s)
        if k == len(ladder) - 1:
            return x0
        a_next, s_next = sched.alpha_sigma(ladder[k + 1])
        # DDIM noise scale; 1 - a^2/a_next^2 is >= 0 because the ladder descends
        noise_std = eta * (s_next / s) * np.sqrt(max(1.0 - (a / a_next) ** 2, 0.0))
        z = a_next * x0 + np.sqrt(max(s_next ** 2 - noise_std ** 2, 0.0)) * eps_hat
        if noise_std > 0.0:
            if rng is None:
                raise ValueError("eta > 0 needs an rng")
            z = z + noise_std * rng.standard_normal(z.shape)
    return z
