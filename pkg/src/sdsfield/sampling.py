"""Coarse-to-fine importance sampling along rays with kernel smoothing.

Weights are handled as unnormalised piecewise-constant densities over bins.
All functions accept a single ray (1-D arrays) or a batch (leading ray axis).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import invert_cdf, merge_rows

DEFAULT_KERNEL = (1.0, 1.0, 1.0)
DEDUP_TOL = 1e-9


@dataclass
class WeightPdf:
    bin_edges: np.ndarray  # (..., N + 1), strictly increasing
    weights: np.ndarray  # (..., N), non-negative, unnormalised

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.bin_edges.shape[-1] != self.weights.shape[-1] + 1:
            raise ValueError("need exactly one more edge than weights")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")

    @property
    def degenerate(self) -> np.ndarray:
        return ~(self.weights.sum(axis=-1) > 0)


def check_kernel(kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64).reshape(-1)
    if k.size % 2 == 0:
        raise ValueError(f"kernel length must be odd, got {k.size}")
    if np.any(k < 0) or not k.sum() > 0:
        raise ValueError("kernel taps must be non-negative with a positive sum")
    return k


def kernel_smooth(pdf: WeightPdf, kernel=DEFAULT_KERNEL) -> WeightPdf:
    """Normalised moving average of the bin weights, edge values replicated.

    All-zero rows stay all-zero.
    """
    k = check_kernel(kernel)
    half = k.size // 2
    v = pdf.weights
    pad = [(0, 0)] * (v.ndim - 1) + [(half, half)]
    vp = np.pad(v, pad, mode="edge")
    n = v.shape[-1]
    out = np.zeros_like(v)
    for j, kj in enumerate(k):
        out += kj * vp[..., j:j + n]
    out /= k.sum()
    return WeightPdf(pdf.bin_edges, np.maximum(out, 0.0))


def importance_sample(pdf: WeightPdf, n_fine: int, rng: np.random.Generator | None = None,
                      u: np.ndarray | None = None, jitter: bool = True):
    """Inverse-transform sampling of a piecewise-constant density.

    Uniforms come from ``u`` if given (shape (..., n_fine) or broadcastable),
    else from ``rng``; with ``jitter=False`` or no rng the stratified
    quantiles ``(k + 0.5) / n_fine`` are used. Rows with no mass fall back to
    the uniform density over the edge range.

    Returns:
        (samples, degenerate) with samples sorted along the last axis.
    """
    if n_fine < 1:
        raise ValueError(f"n_fine must be >= 1, got {n_fine}")
    edges = np.atleast_2d(pdf.bin_edges)
    w = np.atleast_2d(pdf.weights)
    batch_shape = pdf.weights.shape[:-1]
    n_rays, n_bins = w.shape
    degenerate = ~(w.sum(axis=1) > 0)
    if degenerate.any():
        w = w.copy()
        w[degenerate] = 1.0
    cdf = np.cumsum(w, axis=1)
    cdf = np.concatenate([np.zeros((n_rays, 1)), cdf / cdf[:, -1:]], axis=1)
    cdf[:, -1] = 1.0

    if u is None:
        if jitter and rng is not None:
            u = rng.random((n_rays, n_fine))
        else:
            u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n_rays, n_fine))
    u = np.broadcast_to(np.asarray(u, dtype=np.float64).reshape(-1, n_fine) if np.ndim(u) > 0 else u,
                        (n_rays, n_fine))

    samples = invert_cdf(np.ascontiguousarray(np.broadcast_to(edges, (n_rays, n_bins + 1))), cdf,
                         np.ascontiguousarray(u))
    return samples.reshape(batch_shape + (n_fine,)), degenerate.reshape(batch_shape)


def merge_sorted(coarse, fine, tol: float = DEDUP_TOL) -> np.ndarray:
    """Union of two sorted 1-D sequences; entries within ``tol`` of their predecessor are dropped."""
    merged = np.sort(np.concatenate([np.asarray(coarse, dtype=np.float64).reshape(-1),
                                     np.asarray(fine, dtype=np.float64).reshape(-1)]))
    if merged.size == 0:
        return merged
    keep = np.ones(merged.size, dtype=bool)
    last = merged[0]
    for i in range(1, merged.size):
        if merged[i] - last <= tol:
            keep[i] = False
        else:
            last = merged[i]
    return merged[keep]


def merge_sorted_batch(coarse: np.ndarray, fine: np.ndarray, tol: float = DEDUP_TOL):
    """Batched merge. Rows keep a fixed length, so duplicates are flagged instead of removed.

    Returns:
        (merged, order, keep) where ``order`` indexes the concatenation
        ``[coarse, fine]`` and ``keep`` is False for samples within ``tol``
        of the preceding sample.
    """
    coarse = np.asarray(coarse, dtype=np.float64)
    fine = np.asarray(fine, dtype=np.float64)
    shape = coarse.shape[:-1] + (coarse.shape[-1] + fine.shape[-1],)
    rows = int(np.prod(coarse.shape[:-1]))
    merged, order = merge_rows(np.ascontiguousarray(coarse.reshape(rows, coarse.shape[-1])),
                               np.ascontiguousarray(fine.reshape(rows, fine.shape[-1])))
    merged, order = merged.reshape(shape), order.reshape(shape)
    keep = np.ones(merged.shape, dtype=bool)
    keep[..., 1:] = np.diff(merged, axis=-1) > tol
    return merged, order, keep
