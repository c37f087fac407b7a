"""Front-view rasterization of point clouds.

A cloud becomes a (C, H, W) float32 image over the sensor's angular window:
channel 0 carries reflectance and, in two-channel mode, channel 1 carries the
range normalized to the sensor's detection window.  Pixels with no return are
0 in every channel.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .lidar_model import PointCloud, SensorConfig, SphericalCoord, in_fov, in_fov_arrays, spherical_arrays

RASTER_MAGIC = b"L2RI"
RASTER_VERSION = 1
MIN_SIDE = 16


class RasterFormatError(ValueError):
    """Raised when a raster file is malformed or truncated."""


class ChannelMode(enum.Enum):
    REFLECTANCE = "reflectance"
    REFLECTANCE_DISTANCE = "reflectance_distance"

    @property
    def channels(self) -> int:
        return 1 if self is ChannelMode.REFLECTANCE else 2

    @classmethod
    def parse(cls, value) -> "ChannelMode":
        if isinstance(value, cls):
            return value
        aliases = {"1": cls.REFLECTANCE, "exp1": cls.REFLECTANCE,
                   "2": cls.REFLECTANCE_DISTANCE, "exp2": cls.REFLECTANCE_DISTANCE}
        if str(value) in aliases:
            return aliases[str(value)]
        return cls(str(value))


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Channel-first float32 image with every value in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"raster must be (C, H, W), got shape {arr.shape}")
        c, h, w = arr.shape
        if c not in (1, 2, 3):
            raise ValueError(f"raster must have 1, 2 or 3 channels, got {c}")
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"raster sides must be >= {MIN_SIDE}, got {w}x{h}")
        if arr.size and not (np.all(np.isfinite(arr)) and arr.min() >= 0.0 and arr.max() <= 1.0):
            raise ValueError("raster values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()


def pixel_of(s: SphericalCoord, cfg: SensorConfig, out: tuple[int, int]):
    """(u, v) pixel of a direction in a W x H front view, or None outside the view."""
    if not in_fov(s, cfg):
        return None
    w, h = out
    u = math.floor((cfg.h_fov / 2 - s.azimuth) / cfg.h_fov * w)
    v = math.floor((cfg.v_fov / 2 - s.elevation) / cfg.v_fov * h)
    # rounding can push a point a hair inside the FOV edge onto index w or h
    return min(u, w - 1), min(v, h - 1)


def pixel_arrays(az, el, rng, cfg: SensorConfig, out: tuple[int, int]):
    """Vectorized :func:`pixel_of`; returns (u, v, valid)."""
    w, h = out
    valid = in_fov_arrays(az, el, rng, cfg)
    u = np.floor((cfg.h_fov / 2 - az) / cfg.h_fov * w)
    v = np.floor((cfg.v_fov / 2 - el) / cfg.v_fov * h)
    u = np.where(valid, np.minimum(u, w - 1), -1).astype(np.int64)
    v = np.where(valid, np.minimum(v, h - 1), -1).astype(np.int64)
    return u, v, valid


def normalize_distance(rng, cfg: SensorConfig):
    """Linear map of the detection window onto [0, 1], clamped."""
    scaled = (np.asarray(rng, dtype=np.float64) - cfg.min_range) / (cfg.max_range - cfg.min_range)
    out = np.clip(scaled, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def project_frame(cloud: PointCloud, cfg: SensorConfig, mode: ChannelMode, out: tuple[int, int]) -> RasterImage:
    """Rasterize a cloud; the nearest return claims a pixel (ties: lower index)."""
    mode = ChannelMode.parse(mode)
    w, h = out
    data = np.zeros((mode.channels, h, w), dtype=np.float32)
    if len(cloud):
        az, el, rng = spherical_arrays(cloud.xyz, cloud.ranges)
        u, v, valid = pixel_arrays(az, el, rng, cfg, out)
        pix = np.where(valid, v * w + u, -1)
        winner = kernels.zbuffer(pix, rng, w * h)
        filled = np.flatnonzero(winner >= 0)
        src = winner[filled]
        data[0].reshape(-1)[filled] = cloud.reflectance[src]
        if mode.channels == 2:
            data[1].reshape(-1)[filled] = normalize_distance(rng[src], cfg)
    return RasterImage(data)


def to_model_range(img) -> np.ndarray:
    """Affine map [0, 1] -> [-1, 1] for network input."""
    data = img.data if isinstance(img, RasterImage) else np.asarray(img, dtype=np.float32)
    return data * np.float32(2.0) - np.float32(1.0)


def from_model_range(arr) -> RasterImage:
    """Inverse of :func:`to_model_range`, clipped back into [0, 1]."""
    arr = np.asarray(arr, dtype=np.float32)
    return RasterImage(np.clip((arr + np.float32(1.0)) / np.float32(2.0), 0.0, 1.0))


# --- file formats -----------------------------------------------------------

_HEADER = struct.Struct("<4sHIII")


def write_raster(path, img: RasterImage) -> None:
    """Write ``L2RI``: magic, u16 version, u32 width/height/channels, then float32 planes."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RASTER_MAGIC, RASTER_VERSION, img.width, img.height, img.channels))
        fh.write(img.data.astype("<f4").tobytes())


def read_raster(path) -> RasterImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise RasterFormatError(f"{path}: {exc.strerror or exc}") from exc
    if len(data) < _HEADER.size:
        raise RasterFormatError(f"{path}: truncated header")
    magic, version, w, h, c = _HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    if version != RASTER_VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    body = data[_HEADER.size:]
    if len(body) != 4 * w * h * c:
        raise RasterFormatError(f"{path}: expected {w}x{h}x{c} floats, payload has {len(body)} bytes")
    arr = np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)
    try:
        return RasterImage(arr)
    except ValueError as exc:
        raise RasterFormatError(f"{path}: {exc}") from exc


def to_uint8(img: RasterImage) -> np.ndarray:
    """(H, W, C) uint8 view with round-half-even quantization."""
    return np.round(img.data * 255.0).astype(np.uint8).transpose(1, 2, 0)


def quantize(img: RasterImage) -> RasterImage:
    """Snap values to the 8-bit grid so PNG storage round-trips exactly."""
    return RasterImage(np.round(img.data * 255.0).astype(np.float32) / np.float32(255.0))


def write_png(path, img: RasterImage) -> None:
    """Write a 3-channel image as RGB or a 1-channel image as grayscale."""
    arr = to_uint8(img)
    if img.channels == 3:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    elif img.channels == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path, format="PNG")
    else:
        raise ValueError("PNG export takes 1 or 3 channels; split 2-channel rasters first")


def read_png(path) -> RasterImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except (OSError, SyntaxError) as exc:
        raise RasterFormatError(f"{path}: cannot decode PNG ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return RasterImage(arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def write_previews(stem, img: RasterImage) -> list[Path]:
    """One grayscale PNG per channel, named ``<stem>_c<k>.png``."""
    stem = Path(stem)
    paths = []
    for k in range(img.channels):
        p = stem.with_name(f"{stem.name}_c{k}.png")
        write_png(p, RasterImage(img.data[k:k + 1]))
        paths.append(p)
    return paths
