"""Image and auxiliary-map file formats: PNG, binary PPM, and SMAP1 float sidecars."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

SMAP_MAGIC = b"SMAP1"
SMAP_CHANNELS = {"depth": 0, "disparity": 1, "opacity": 2, "zvar": 3}
_SMAP_HEADER = struct.Struct("<5sIII")


class ImageFormatError(ValueError):
    """Raised for malformed image or sidecar files."""


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to 8 bits with round-half-to-even."""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Load a PNG or PPM as float64 RGB in [0, 1], shape (H, W, 3)."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path).astype(np.float64) / 255.0
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def ppm_bytes(image: np.ndarray) -> bytes:
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    h, w = arr.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr[..., :3]).tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    """Parse a binary P6 file with maxval 255; returns uint8 (H, W, 3)."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    raster = data[pos:pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise ImageFormatError(f"{path}: expected {w * h * 3} raster bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


# --- auxiliary maps -----------------------------------------------------------

def normalize_map(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> tuple[np.ndarray, float, float]:
    """Linear map of ``[lo, hi]`` onto [0, 1]; bounds default to the finite min/max.

    A constant map normalizes to all zeros.
    """
    v = np.asarray(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    lo = float(finite.min()) if lo is None and finite.size else (0.0 if lo is None else lo)
    hi = float(finite.max()) if hi is None and finite.size else (1.0 if hi is None else hi)
    span = hi - lo
    out = np.zeros_like(v) if span <= 0 else np.clip((v - lo) / span, 0.0, 1.0)
    return np.nan_to_num(out), lo, hi


def smap_bytes(values: np.ndarray, channel: str) -> bytes:
    if channel not in SMAP_CHANNELS:
        raise ValueError(f"unknown map channel {channel!r}; choose from {tuple(SMAP_CHANNELS)}")
    v = np.asarray(values)
    h, w = v.shape
    return _SMAP_HEADER.pack(SMAP_MAGIC, w, h, SMAP_CHANNELS[channel]) + v.astype("<f4").tobytes()


def write_smap(path, values: np.ndarray, channel: str) -> None:
    Path(path).write_bytes(smap_bytes(values, channel))


def read_smap(path) -> tuple[np.ndarray, str]:
    data = Path(path).read_bytes()
    if len(data) < _SMAP_HEADER.size:
        raise ImageFormatError(f"{path}: truncated map header")
    magic, w, h, tag = _SMAP_HEADER.unpack_from(data)
    if magic != SMAP_MAGIC:
        raise ImageFormatError(f"{path}: bad map magic {magic!r}")
    names = {v: k for k, v in SMAP_CHANNELS.items()}
    if tag not in names:
        raise ImageFormatError(f"{path}: unknown channel tag {tag}")
    body = data[_SMAP_HEADER.size:]
    if len(body) != 4 * w * h:
        raise ImageFormatError(f"{path}: expected {4 * w * h} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64), names[tag]


def write_aux_maps(prefix, maps: dict) -> dict:
    """Write each named map as a grayscale PNG plus SMAP1 sidecar.

    Returns ``{name: (lo, hi)}``, the normalization bounds used for each PNG.
    """
    prefix = Path(prefix)
    bounds = {}
    for name, values in maps.items():
        lo, hi = (0.0, 1.0) if name == "opacity" else (None, None)
        norm, lo, hi = normalize_map(values, lo, hi)
        write_png(prefix.with_name(f"{prefix.name}_{name}.png"), to_uint8(norm))
        write_smap(prefix.with_name(f"{prefix.name}_{name}.smap"), values, name)
        bounds[name] = (lo, hi)
    return bounds
