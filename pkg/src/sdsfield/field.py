"""Dense voxel radiance field: trilinear interpolation of raw vertex values.

Density is ``softplus(raw)`` and colour is ``sigmoid(raw)``; both activations
are applied after interpolation. Points outside the bounding box have zero
density and black colour.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from ._kernels import query_points, scatter_activated, take_merged

MAGIC = b"SFLD1"
EMPTY_DENSITY = 0.01

def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) overflows for large y, where softplus is the identity anyway
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


class CheckpointError(ValueError):
    """Raised when a checkpoint file is truncated or has the wrong magic."""


@dataclass
class VoxelField:
    density_raw: np.ndarray  # (nx, ny, nz)
    color_raw: np.ndarray  # (nx, ny, nz, 3)
    background_raw: np.ndarray  # (3,)
    bbox_min: np.ndarray = dc_field(default_factory=lambda: np.full(3, -1.0))
    bbox_max: np.ndarray = dc_field(default_factory=lambda: np.full(3, 1.0))

    def __post_init__(self):
        self.density_raw = np.asarray(self.density_raw, dtype=np.float64)
        self.color_raw = np.asarray(self.color_raw, dtype=np.float64)
        self.background_raw = np.asarray(self.background_raw, dtype=np.float64).reshape(3)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if self.density_raw.ndim != 3 or min(self.density_raw.shape) < 2:
            raise ValueError(f"density grid must be 3-D with every side >= 2, got {self.density_raw.shape}")
        if self.color_raw.shape != self.density_raw.shape + (3,):
            raise ValueError(f"color grid shape {self.color_raw.shape} does not match density {self.density_raw.shape}")
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox_min must be < bbox_max componentwise")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.density_raw.shape

    @property
    def background(self) -> np.ndarray:
        return sigmoid(self.background_raw)

    def vertex_positions(self) -> np.ndarray:
        """World coordinates of every vertex, shape (nx, ny, nz, 3)."""
        axes = [np.linspace(self.bbox_min[a], self.bbox_max[a], self.resolution[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "VoxelField":
        return VoxelField(self.density_raw.copy(), self.color_raw.copy(), self.background_raw.copy(),
                          self.bbox_min.copy(), self.bbox_max.copy())

    def parameters(self) -> dict[str, np.ndarray]:
        return {"density_raw": self.density_raw, "color_raw": self.color_raw,
                "background_raw": self.background_raw}


@dataclass
class FieldSample:
    """Activated field values at a batch of points plus the pre-activation values.

    Channels are packed as ``[density, r, g, b]``.
    """

    points: np.ndarray  # (P, 3)
    pre: np.ndarray  # (P, 4) interpolated raw values
    act: np.ndarray  # (P, 4) activated values, zero outside the box
    inside: np.ndarray  # (P,) bool

    @property
    def density(self) -> np.ndarray:
        return self.act[:, 0]

    @property
    def color(self) -> np.ndarray:
        return self.act[:, 1:]

    @property
    def density_pre(self) -> np.ndarray:
        return self.pre[:, 0]

    @property
    def color_pre(self) -> np.ndarray:
        return self.pre[:, 1:]

    def __len__(self):
        return self.points.shape[0]


def merge_samples(a: FieldSample, b: FieldSample, order: np.ndarray) -> FieldSample:
    """Interleave two per-ray sample batches; ``order`` (R, N + M) indexes each ray's ``[a, b]``."""
    n_rays = order.shape[0]
    n, m = len(a) // n_rays, len(b) // n_rays
    return FieldSample(*(take_merged(order, x.reshape(n_rays * n, -1), y.reshape(n_rays * m, -1)).reshape(
        (-1,) + x.shape[1:]) for x, y in ((a.points, b.points), (a.pre, b.pre), (a.act, b.act),
                                          (a.inside, b.inside))))


def _grid_args(fld: VoxelField):
    nx, ny, nz = fld.resolution
    scale = (np.array([nx, ny, nz]) - 1) / (fld.bbox_max - fld.bbox_min)
    return nx, ny, nz, fld.bbox_min, scale


def query(fld: VoxelField, points: np.ndarray) -> FieldSample:
    """Density and colour at ``points`` of shape (P, 3)."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    packed = np.concatenate([fld.density_raw.reshape(-1, 1), fld.color_raw.reshape(-1, 3)], axis=1)
    pre, act, inside = query_points(packed, *_grid_args(fld), points)
    return FieldSample(points, pre, act, inside)


@dataclass
class FieldGrad:
    density_raw: np.ndarray
    color_raw: np.ndarray
    background_raw: np.ndarray

    @classmethod
    def zeros_like(cls, fld: VoxelField) -> "FieldGrad":
        return cls(np.zeros_like(fld.density_raw), np.zeros_like(fld.color_raw), np.zeros(3))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"density_raw": self.density_raw, "color_raw": self.color_raw,
                "background_raw": self.background_raw}

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.as_dict().values())))


def query_grad(fld: VoxelField, sample, grad_density: np.ndarray, grad_color: np.ndarray,
               out: FieldGrad | None = None) -> FieldGrad:
    """Accumulate d(loss)/d(raw vertex values) given upstream grads on a query.

    ``sample`` is either the :class:`FieldSample` returned by :func:`query`
    or the raw (P, 3) points, in which case the forward is recomputed.
    """
    if not isinstance(sample, FieldSample):
        sample = query(fld, sample)
    if out is None:
        out = FieldGrad.zeros_like(fld)
    acc = np.zeros((fld.density_raw.size, 4))
    scatter_activated(np.ascontiguousarray(grad_density, dtype=np.float64).reshape(-1),
                      np.ascontiguousarray(grad_color, dtype=np.float64).reshape(-1, 3),
                      sample.act, *_grid_args(fld), sample.points, acc)
    out.density_raw += acc[:, 0].reshape(fld.resolution)
    out.color_raw += acc[:, 1:].reshape(fld.resolution + (3,))
    return out


def init_field(resolution=(32, 32, 32), bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), init_mode: str = "blob",
               blob_peak: float = 5.0, blob_width: float = 0.4, color: float = 0.5,
               background: float = 0.5) -> VoxelField:
    """Create a field.

    ``"empty"`` sets every vertex to density 0.01. ``"blob"`` adds a Gaussian
    bump of activated density centred in the box on top of that floor, scaled so
    the density at the centre equals ``blob_peak`` (exactly when the centre is a
    vertex, i.e. for odd resolutions). ``blob_width`` is the Gaussian standard
    deviation in scene units.
    """
    resolution = tuple(int(r) for r in resolution)
    if len(resolution) != 3 or min(resolution) < 2:
        raise ValueError(f"resolution must be three counts >= 2, got {resolution}")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    fld = VoxelField(np.zeros(resolution), np.zeros(resolution + (3,)), np.zeros(3), lo, hi)
    if init_mode == "empty":
        dens = np.full(resolution, EMPTY_DENSITY)
    elif init_mode == "blob":
        r2 = np.sum((fld.vertex_positions() - 0.5 * (lo + hi)) ** 2, axis=-1)
        dens = EMPTY_DENSITY + (blob_peak - EMPTY_DENSITY) * np.exp(-0.5 * r2 / blob_width ** 2)
    else:
        raise ValueError(f"unknown init_mode {init_mode!r}")
    fld.density_raw[...] = softplus_inv(dens)
    fld.color_raw[...] = logit(color)
    fld.background_raw[...] = logit(background)
    return fld


# --- checkpoint IO -----------------------------------------------------------
#
# Layout (little-endian): b"SFLD1", resolution 3*u32, bbox min then max 6*f64,
# density_raw f32 with x varying fastest, color_raw f32 as per-vertex rgb
# triplets with vertices in the same x-fastest order, background_raw 3*f32.

def checkpoint_bytes(fld: VoxelField) -> bytes:
    nx, ny, nz = fld.resolution
    parts = [MAGIC, struct.pack("<3I", nx, ny, nz),
             np.concatenate([fld.bbox_min, fld.bbox_max]).astype("<f8").tobytes(),
             fld.density_raw.transpose(2, 1, 0).astype("<f4").tobytes(),
             fld.color_raw.transpose(2, 1, 0, 3).astype("<f4").tobytes(),
             fld.background_raw.astype("<f4").tobytes()]
    return b"".join(parts)


def field_from_bytes(data: bytes) -> VoxelField:
    if data[:5] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:5]!r}, expected {MAGIC!r}")
    off = 5
    if len(data) < off + 12 + 48:
        raise CheckpointError("checkpoint header truncated")
    nx, ny, nz = struct.unpack_from("<3I", data, off)
    off += 12
    bbox = np.frombuffer(data, "<f8", 6, off).astype(np.float64)
    off += 48
    n = nx * ny * nz
    expected = off + 4 * (n + 3 * n + 3)
    if len(data) != expected:
        raise CheckpointError(f"checkpoint size {len(data)} does not match resolution {nx}x{ny}x{nz}")
    dens = np.frombuffer(data, "<f4", n, off).reshape(nz, ny, nx).transpose(2, 1, 0)
    off += 4 * n
    col = np.frombuffer(data, "<f4", 3 * n, off).reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    off += 12 * n
    bg = np.frombuffer(data, "<f4", 3, off)
    return VoxelField(dens.astype(np.float64), col.astype(np.float64), bg.astype(np.float64), bbox[:3], bbox[3:])


def save_field(fld: VoxelField, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(fld))


def load_field(path) -> VoxelField:
    return field_from_bytes(Path(path).read_bytes())
