"""Points, clouds, the sensor envelope and the coordinate conversions between them.

Frame convention: sensor at the origin, x forward, y left, z up.  Azimuth is
measured from +x towards +y (positive left), elevation from the horizontal
plane (positive up).  All angles are degrees.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POINT_MAGIC = b"L2PC"
POINT_VERSION = 1


class PointCloudFormatError(ValueError):
    """Raised when a point-cloud file cannot be parsed."""


@dataclass(frozen=True)
class LidarPoint:
    x: float
    y: float
    z: float
    reflectance: float

    def __post_init__(self):
        if not 0.0 <= self.reflectance <= 1.0:
            raise ValueError(f"reflectance {self.reflectance} outside [0, 1]")
        r = self.range
        if not math.isfinite(r) or r <= 0.0:
            raise ValueError(f"point ({self.x}, {self.y}, {self.z}) has degenerate range {r}")

    @property
    def range(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class SphericalCoord:
    azimuth: float
    elevation: float
    range: float

    def __post_init__(self):
        if not -180.0 < self.azimuth <= 180.0:
            raise ValueError(f"azimuth {self.azimuth} outside (-180, 180]")
        if not -90.0 < self.elevation < 90.0:
            raise ValueError(f"elevation {self.elevation} outside (-90, 90)")
        if not self.range > 0.0:
            raise ValueError(f"range {self.range} must be positive")


@dataclass(frozen=True)
class SensorConfig:
    """Angular grid, field of view and range window of the scanner.

    Defaults reproduce a 0.1 x 0.1 degree grid over a 115 x 25 degree field of
    view with returns between 0.1 m and 250 m, i.e. a 1150 x 250 ray grid.
    """

    h_fov: float = 115.0
    v_fov: float = 25.0
    az_res: float = 0.1
    el_res: float = 0.1
    min_range: float = 0.1
    max_range: float = 250.0

    def __post_init__(self):
        for name in ("h_fov", "v_fov", "az_res", "el_res"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.h_fov >= 360.0 or self.v_fov >= 180.0:
            raise ValueError("field of view too wide for a single front view")
        for ratio, name in ((self.h_fov / self.az_res, "h_fov/az_res"), (self.v_fov / self.el_res, "v_fov/el_res")):
            if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
                raise ValueError(f"{name} = {ratio} is not a positive integer")
        if not 0.0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")

    @property
    def grid_width(self) -> int:
        return int(round(self.h_fov / self.az_res))

    @property
    def grid_height(self) -> int:
        return int(round(self.v_fov / self.el_res))

    def ray_grid_shape(self, subsample: int = 1) -> tuple[int, int]:
        """(columns, rows) of the ray grid when keeping every ``subsample``-th step."""
        if subsample < 1:
            raise ValueError("subsample must be >= 1")
        return -(-self.grid_width // subsample), -(-self.grid_height // subsample)

    def to_text(self) -> str:
        return ",".join(repr(float(v)) for v in (self.h_fov, self.v_fov, self.az_res, self.el_res,
                                                 self.min_range, self.max_range))

    @classmethod
    def from_text(cls, text: str) -> "SensorConfig":
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 6:
            raise ValueError(f"sensor config needs 6 values, got {len(vals)}")
        return cls(*vals)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """One frame of returns, stored column-wise.

    ``xyz`` is (N, 3) float64 and ``reflectance`` is (N,) float64.  Point order
    is meaningful only as a tie-breaker during rasterization.
    """

    xyz: np.ndarray
    reflectance: np.ndarray
    frame_id: int = 0
    _ranges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        refl = np.ascontiguousarray(self.reflectance, dtype=np.float64).reshape(-1)
        if xyz.shape[0] != refl.shape[0]:
            raise ValueError("xyz and reflectance lengths differ")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("non-finite coordinates in point cloud")
        if refl.size and (refl.min() < 0.0 or refl.max() > 1.0):
            raise ValueError("reflectance outside [0, 1]")
        ranges = point_ranges(xyz)
        if ranges.size and not ranges.min() > 0.0:
            raise ValueError("point at the sensor origin")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "reflectance", refl)
        object.__setattr__(self, "_ranges", ranges)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        return self._ranges

    @classmethod
    def from_points(cls, points, frame_id: int = 0) -> "PointCloud":
        pts = list(points)
        xyz = np.array([[p.x, p.y, p.z] for p in pts], dtype=np.float64).reshape(-1, 3)
        refl = np.array([p.reflectance for p in pts], dtype=np.float64)
        return cls(xyz, refl, frame_id)

    def points(self) -> list[LidarPoint]:
        return [LidarPoint(float(x), float(y), float(z), float(r))
                for (x, y, z), r in zip(self.xyz, self.reflectance)]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (self.frame_id == other.frame_id and np.array_equal(self.xyz, other.xyz)
                and np.array_equal(self.reflectance, other.reflectance))


def point_ranges(xyz: np.ndarray) -> np.ndarray:
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    return np.sqrt(x * x + y * y + z * z)


def cartesian_to_spherical(p: LidarPoint) -> SphericalCoord:
    r = p.range
    if not r > 0.0:
        raise ValueError("cannot convert a point at the origin")
    az = math.degrees(math.atan2(p.y, p.x))
    if az == -180.0:
        az = 180.0
    el = math.degrees(math.asin(max(-1.0, min(1.0, p.z / r))))
    return SphericalCoord(az, el, r)


def spherical_to_cartesian(s: SphericalCoord, reflectance: float = 0.0) -> LidarPoint:
    az = math.radians(s.azimuth)
    el = math.radians(s.elevation)
    horiz = s.range * math.cos(el)
    return LidarPoint(horiz * math.cos(az), horiz * math.sin(az), s.range * math.sin(el), reflectance)


def spherical_arrays(xyz: np.ndarray, ranges: np.ndarray | None = None):
    """Vectorized (azimuth, elevation, range) in degrees/meters for an (N, 3) array."""
    if ranges is None:
        ranges = point_ranges(xyz)
    az = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
    az = np.where(az == -180.0, 180.0, az)
    with np.errstate(invalid="ignore", divide="ignore"):
        el = np.degrees(np.arcsin(np.clip(xyz[:, 2] / ranges, -1.0, 1.0)))
    return az, el, ranges


def direction_vectors(az_deg: np.ndarray, el_deg: np.ndarray) -> np.ndarray:
    """Unit ray directions (..., 3) for the given angles."""
    az, el = np.broadcast_arrays(np.radians(az_deg), np.radians(el_deg))
    cos_el = np.cos(el)
    return np.stack([cos_el * np.cos(az), cos_el * np.sin(az), np.sin(el)], axis=-1)


def in_fov(s: SphericalCoord, cfg: SensorConfig) -> bool:
    return (abs(s.azimuth) < cfg.h_fov / 2 and abs(s.elevation) < cfg.v_fov / 2
            and cfg.min_range <= s.range <= cfg.max_range)


def in_fov_arrays(az, el, rng, cfg: SensorConfig) -> np.ndarray:
    return ((np.abs(az) < cfg.h_fov / 2) & (np.abs(el) < cfg.v_fov / 2)
            & (rng >= cfg.min_range) & (rng <= cfg.max_range))


def bin_centers(cfg: SensorConfig, width: int, height: int):
    """Azimuth of each column center and elevation of each row center.

    Column 0 is the leftmost (most positive azimuth) and row 0 the topmost, so a
    ray cast through these centers lands back in its own cell under
    :func:`lidar2photo.projection.pixel_of`.
    """
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    az = cfg.h_fov / 2 - (u + 0.5) * (cfg.h_fov / width)
    el = cfg.v_fov / 2 - (v + 0.5) * (cfg.v_fov / height)
    return az, el


# --- file formats -----------------------------------------------------------

_HEADER = struct.Struct("<4sHQ")


def write_point_cloud(path, cloud: PointCloud) -> None:
    n = len(cloud)
    rec = np.empty((n, 4), dtype="<f4")
    rec[:, :3] = cloud.xyz
    rec[:, 3] = cloud.reflectance
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(POINT_MAGIC, POINT_VERSION, n))
        fh.write(rec.tobytes())


def read_point_cloud(path, frame_id: int = 0) -> PointCloud:
    """Read an ``L2PC`` binary file, or a ``x,y,z,reflectance`` CSV by extension."""
    path = Path(path)
    if path.suffix.lower() in (".csv", ".txt"):
        return read_point_cloud_csv(path, frame_id)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise PointCloudFormatError(f"{path}: truncated header")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != POINT_MAGIC:
        raise PointCloudFormatError(f"{path}: bad magic {magic!r}")
    if version != POINT_VERSION:
        raise PointCloudFormatError(f"{path}: unsupported version {version}")
    body = data[_HEADER.size:]
    if len(body) != n * 16:
        raise PointCloudFormatError(f"{path}: expected {n} points, payload has {len(body)} bytes")
    rec = np.frombuffer(body, dtype="<f4").reshape(n, 4).astype(np.float64)
    try:
        return PointCloud(rec[:, :3], rec[:, 3], frame_id)
    except ValueError as exc:
        raise PointCloudFormatError(f"{path}: {exc}") from exc


def read_point_cloud_csv(path, frame_id: int = 0) -> PointCloud:
    path = Path(path)
    text = path.read_text()
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if rows and not _is_number(rows[0].split(",")[0]):
        rows = rows[1:]  # header line
    try:
        arr = np.loadtxt(io.StringIO("\n".join(rows)), delimiter=",", ndmin=2) if rows else np.zeros((0, 4))
    except ValueError as exc:
        raise PointCloudFormatError(f"{path}: {exc}") from exc
    if arr.shape[1] != 4:
        raise PointCloudFormatError(f"{path}: expected 4 columns, found {arr.shape[1]}")
    try:
        return PointCloud(arr[:, :3], arr[:, 3], frame_id)
    except ValueError as exc:
        raise PointCloudFormatError(f"{path}: {exc}") from exc


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
