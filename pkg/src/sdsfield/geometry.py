"""Pinhole cameras, ray casting and stratified sampling along rays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import ray_points


class CameraError(ValueError):
    """Raised for cameras whose basis or intrinsics are degenerate."""


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float
    image_width: int
    image_height: int

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if not 0.0 < self.vertical_fov < np.pi:
            raise CameraError(f"vertical_fov must lie in (0, pi), got {self.vertical_fov}")
        if self.image_width < 1 or self.image_height < 1:
            raise CameraError(f"image size must be >= 1, got {self.image_width}x{self.image_height}")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return the right-handed (right, up, forward) basis via Gram-Schmidt."""
        forward = self.look_at - self.position
        norm = np.linalg.norm(forward)
        if norm == 0.0:
            raise CameraError("look_at coincides with position")
        forward = forward / norm
        up = self.up - np.dot(self.up, forward) * forward
        up_norm = np.linalg.norm(up)
        if up_norm < 1e-9 * max(np.linalg.norm(self.up), 1.0):
            raise CameraError("up vector is parallel to the viewing direction")
        up = up / up_norm
        right = np.cross(forward, up)
        return right, up, forward


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float


@dataclass
class Rays:
    """A batch of rays stored as arrays; ``rays[i]`` gives a single :class:`Ray`."""

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3), unit norm
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, i) -> Ray:
        return Ray(self.origins[i], self.directions[i], float(self.near[i]), float(self.far[i]))

    def points(self, z: np.ndarray) -> np.ndarray:
        """World positions of samples ``z`` of shape (R, N); returns (R, N, 3)."""
        z = np.ascontiguousarray(z, dtype=np.float64)
        return ray_points(np.ascontiguousarray(self.origins), np.ascontiguousarray(self.directions),
                          z).reshape(z.shape + (3,))


def orbit_camera(azimuth: float, elevation: float, radius: float, vertical_fov: float = 0.6981317007977318,
                 width: int = 64, height: int = 64, target=(0.0, 0.0, 0.0)) -> Camera:
    """Camera on a sphere around ``target`` looking inward, y up. Angles in radians.

    Azimuth 0 places the camera on +z; positive azimuth rotates toward +x.
    """
    target = np.asarray(target, dtype=np.float64)
    ce = np.cos(elevation)
    offset = radius * np.array([ce * np.sin(azimuth), np.sin(elevation), ce * np.cos(azimuth)])
    return Camera(target + offset, target, np.array([0.0, 1.0, 0.0]), vertical_fov, width, height)


def pixel_directions(camera: Camera) -> np.ndarray:
    """Unit directions through every pixel centre, row-major, shape (H*W, 3)."""
    right, up, forward = camera.basis()
    w, h = camera.image_width, camera.image_height
    half = np.tan(0.5 * camera.vertical_fov)
    # pixel centres at half-integer coordinates; square pixels, scale set by image height
    xs = (np.arange(w) + 0.5 - 0.5 * w) / (0.5 * h) * half
    ys = (np.arange(h) + 0.5 - 0.5 * h) / (0.5 * h) * half
    px, py = np.meshgrid(xs, ys)
    d = forward[None, :] + px.reshape(-1, 1) * right[None, :] - py.reshape(-1, 1) * up[None, :]
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def box_bounds(origins: np.ndarray, directions: np.ndarray, bbox_min, bbox_max, n_coarse: int,
               default=(0.0, 1.0)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab-intersect rays with an axis-aligned box.

    The far bound is pushed past the exit point by one coarse bin so that the
    last stratified sample always lies outside the box, where density is zero.
    Rays missing the box get ``default`` bounds and ``hit=False``.

    Returns:
        near, far, hit
    """
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (bbox_min[None] - origins) * inv
        t1 = (bbox_max[None] - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
    tmin = np.maximum(tmin, 0.0)
    hit = tmax > tmin + 1e-9
    length = np.where(hit, tmax - tmin, 1.0)
    near = np.where(hit, tmin, default[0])
    far = np.where(hit, tmax + length / max(n_coarse - 1, 1), default[1])
    return near, far, hit


def cast_rays(camera: Camera, bbox_min=None, bbox_max=None, n_coarse: int = 32,
              near: float = 0.05, far: float = 10.0) -> Rays:
    """One ray per pixel, row-major.

    With a bounding box the near/far range is clipped to the box (see
    :func:`box_bounds`); otherwise the fixed ``near``/``far`` are used.
    """
    dirs = pixel_directions(camera)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    if bbox_min is None:
        n = np.full(len(dirs), float(near))
        f = np.full(len(dirs), float(far))
    else:
        n, f, _ = box_bounds(origins, dirs, bbox_min, bbox_max, n_coarse, default=(near, far))
    return Rays(origins, dirs, n, f)


def bin_edges(near: np.ndarray, far: np.ndarray, n: int) -> np.ndarray:
    """Equal-width bin edges per ray, shape (R, n + 1)."""
    s = np.linspace(0.0, 1.0, n + 1)
    return near[:, None] + (far - near)[:, None] * s[None, :]


def stratified_sample(near, far, n_coarse: int, rng: np.random.Generator | None = None,
                      jitter: bool = True) -> np.ndarray:
    """One uniform draw per equal-width bin of ``[near, far]``.

    ``near``/``far`` may be scalars or arrays of shape (R,). Without jitter
    (or without an rng) the bin midpoints are returned. Output shape (R, n).
    """
    if n_coarse < 2:
        raise ValueError(f"n_coarse must be >= 2, got {n_coarse}")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    step = (far - near) / n_coarse
    if jitter and rng is not None:
        u = rng.random((near.shape[0], n_coarse))
    else:
        u = np.full((near.shape[0], n_coarse), 0.5)
    z = near[:, None] + (np.arange(n_coarse)[None, :] + u) * step[:, None]
    return z
