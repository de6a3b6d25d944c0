"""Procedural reference fields used as ground truth for the target oracle."""

from __future__ import annotations

import numpy as np

from .field import VoxelField, logit, softplus_inv

SCENES = ("sphere", "two_spheres")


def sphere_field(resolution=(32, 32, 32), radius: float = 0.6, center=(0.0, 0.0, 0.0), density: float = 40.0,
                 edge_cells: float = 1.0, background=(0.6, 0.65, 0.7), bbox=(-1.0, 1.0)) -> VoxelField:
    """Solid sphere whose raw density is a clamped linear function of signed distance.

    The density goes from ~0 to ``density`` over ``edge_cells`` voxel widths
    centred on the surface. Colour varies smoothly with position so that
    different views see different appearance.
    """
    return _spheres_field(resolution, [(np.asarray(center, dtype=np.float64), radius)], density, edge_cells,
                          background, bbox)


def two_spheres_field(resolution=(32, 32, 32), density: float = 40.0, edge_cells: float = 1.0,
                      background=(0.6, 0.65, 0.7), bbox=(-1.0, 1.0)) -> VoxelField:
    spheres = [(np.array([-0.35, 0.0, 0.0]), 0.4), (np.array([0.4, 0.15, 0.1]), 0.3)]
    return _spheres_field(resolution, spheres, density, edge_cells, background, bbox)


def _spheres_field(resolution, spheres, density, edge_cells, background, bbox) -> VoxelField:
    lo, hi = np.full(3, float(bbox[0])), np.full(3, float(bbox[1]))
    res = tuple(int(r) for r in resolution)
    fld = VoxelField(np.zeros(res), np.zeros(res + (3,)), logit(np.asarray(background, dtype=np.float64)), lo, hi)
    pos = fld.vertex_positions()
    sdf = np.min([np.linalg.norm(pos - c, axis=-1) - r for c, r in spheres], axis=0)
    cell = float(np.min((hi - lo) / (np.array(res) - 1)))
    raw_max = float(softplus_inv(density))
    raw_min = -8.0
    # raw crosses zero at the surface; full swing from raw_min to raw_max takes edge_cells voxels
    slope = (raw_max - raw_min) / (edge_cells * cell)
    raw = np.clip(-sdf * slope, raw_min, raw_max)
    fld.density_raw[...] = raw
    rgb = np.stack([0.5 + 0.35 * np.tanh(1.5 * pos[..., 0]),
                    0.5 + 0.35 * np.tanh(1.5 * pos[..., 1]),
                    0.5 - 0.35 * np.tanh(1.5 * pos[..., 2])], axis=-1)
    fld.color_raw[...] = logit(rgb)
    return fld


def make_scene(name: str, resolution=(32, 32, 32)) -> VoxelField:
    if name == "sphere":
        return sphere_field(resolution)
    if name == "two_spheres":
        return two_spheres_field(resolution)
    raise ValueError(f"unknown scene {name!r}; choose from {SCENES}")
