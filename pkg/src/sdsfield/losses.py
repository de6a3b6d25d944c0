"""Score-distillation losses in latent and image space plus z-variance regularisation.

Each loss returns its value together with the gradient w.r.t. its
differentiable inputs; clean estimates and the foreground gate are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .diffusion import LatentCodec
from .field import FieldGrad, VoxelField
from .renderer import ImageRender, RenderOutput, image_grad

ZVAR_GATE = 0.5


@dataclass
class LossConfig:
    lambda_rgb: float = 0.1
    lambda_zvar: float = 3.0
    latent_loss: bool = True  # False leaves only the image-space residual
    zvar_gate: float = ZVAR_GATE


@dataclass
class LossBreakdown:
    sds_latent: float
    sds_image: float
    zvar: float
    total: float
    t_used: float
    weight: float
    foreground_ray_fraction: float

    def as_dict(self) -> dict:
        return asdict(self)


def sds_latent_loss(z, z_hat, w: float):
    r = np.asarray(z, dtype=np.float64) - z_hat
    return w * float(np.sum(r * r)), 2.0 * w * r


def sds_plus_loss(z, z_hat, x, x_hat, w: float, lambda_rgb: float):
    """``w * (|z - z_hat|^2 + lambda_rgb |x - x_hat|^2)`` and its gradients w.r.t. z and x."""
    rz = np.asarray(z, dtype=np.float64) - z_hat
    rx = np.asarray(x, dtype=np.float64) - x_hat
    value = w * (float(np.sum(rz * rz)) + lambda_rgb * float(np.sum(rx * rx)))
    return value, 2.0 * w * rz, 2.0 * w * lambda_rgb * rx


def noise_residual_grad(eps_hat, eps, w: float):
    """The classic SDS latent gradient ``w (eps_hat - eps)``, for comparison with the latent form."""
    return w * (np.asarray(eps_hat) - np.asarray(eps))


def zvar_loss(outputs, gate: float = ZVAR_GATE):
    """Mean over rays of ``[opacity > gate] * zvar``.

    ``outputs`` is a :class:`RenderOutput` (one entry per ray) or a list of
    them. The gate is a hard indicator with no gradient. Returns
    (value, d value / d zvar per ray, foreground mask).
    """
    if isinstance(outputs, RenderOutput):
        outputs = [outputs]
    opacity = np.concatenate([np.atleast_1d(o.opacity) for o in outputs])
    zvar = np.concatenate([np.atleast_1d(o.zvar) for o in outputs])
    if opacity.size == 0:
        raise ValueError("zvar_loss needs at least one ray")
    fg = opacity > gate
    value = float(np.sum(np.where(fg, zvar, 0.0)) / opacity.size)
    return value, fg / opacity.size, fg


def total_loss(fld: VoxelField, result: ImageRender, z_hat: np.ndarray, x_hat: np.ndarray, t: float,
               w: float, cfg: LossConfig, codec: LatentCodec, out: FieldGrad | None = None):
    """Full objective for one rendered view and its gradient w.r.t. the field parameters.

    ``total = w * (sds_latent + lambda_rgb * sds_image) + lambda_zvar * zvar``
    where ``sds_latent`` is reported as 0 when the latent term is disabled.
    """
    x = result.image
    z = codec.encode(x)
    rz = z - z_hat
    rx = x - x_hat
    sds_latent = float(np.sum(rz * rz)) if cfg.latent_loss else 0.0
    sds_image = float(np.sum(rx * rx))
    g_x = 2.0 * w * cfg.lambda_rgb * rx
    if cfg.latent_loss:
        g_x = g_x + codec.encode_adjoint(2.0 * w * rz)

    zv, g_zv, fg = zvar_loss(result.output, cfg.zvar_gate)
    total = w * (sds_latent + cfg.lambda_rgb * sds_image) + cfg.lambda_zvar * zv
    grads = image_grad(fld, result, g_color=g_x.reshape(-1, 3),
                       g_zvar=cfg.lambda_zvar * g_zv if cfg.lambda_zvar else None, out=out)
    breakdown = LossBreakdown(sds_latent, sds_image, zv, float(total), float(t), float(w), float(fg.mean()))
    return breakdown, grads


def loss_value(result: ImageRender, z_hat, x_hat, w: float, cfg: LossConfig, codec: LatentCodec) -> float:
    """Forward-only objective, used as the finite-difference oracle for :func:`total_loss`."""
    x = result.image
    z = codec.encode(x)
    value = w * cfg.lambda_rgb * float(np.sum((x - x_hat) ** 2))
    if cfg.latent_loss:
        value += w * float(np.sum((z - z_hat) ** 2))
    opacity, zvar = result.output.opacity, result.output.zvar
    return value + cfg.lambda_zvar * float(np.sum(np.where(opacity > cfg.zvar_gate, zvar, 0.0)) / opacity.size)
