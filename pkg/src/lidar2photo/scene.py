"""Synthetic street scenes: yawed cuboid cars and walls on a flat ground plane.

The same ray caster serves both sensors.  The LiDAR casts one ray per cell of
its (optionally subsampled) angular grid; the camera casts one ray per pixel
through the same angular window, so LiDAR cell (i, j) and camera pixel (i, j)
look along the identical direction when the grids coincide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .lidar_model import PointCloud, SensorConfig, bin_centers, direction_vectors
from .projection import MIN_SIDE, RasterImage

BLACK_MAX_REFLECTANCE = 0.05
BLACK_MAX_RGB = 0.1

# Body paint palette: (name, rgb, reflectance).  Every entry differs from the
# ground, sky and wall colors by more than 0.3 in at least one channel, so the
# color detector never mistakes scenery for a car.
CAR_PALETTE = (
    ("white", (0.94, 0.94, 0.94), 0.85),
    ("red", (0.80, 0.10, 0.10), 0.50),
    ("blue", (0.10, 0.20, 0.80), 0.25),
)
BLACK_PAINT = ("black", (0.03, 0.03, 0.03), 0.02)
SKY_COLOR = (0.55, 0.75, 0.95)
WALL_COLOR = (0.75, 0.62, 0.45)
WALL_REFLECTANCE = 0.40

# A car counts toward the ground truth only if its largest visible piece covers
# at least this many pixels and that piece's bounding box has IoU >= the second
# value with the box around all of the car's visible pixels.
MIN_VISIBLE_AREA = 6
MIN_PIECE_IOU = 0.5


class SceneGenerationError(RuntimeError):
    """Raised when cars cannot be placed without overlap."""


@dataclass(frozen=True)
class Cuboid:
    """Box on the ground: footprint center, yaw (deg), dimensions (m), paint."""

    center: tuple[float, float]
    yaw: float
    dimensions: tuple[float, float, float]
    color: tuple[float, float, float]
    reflectance: float

    def __post_init__(self):
        if min(self.dimensions) <= 0:
            raise ValueError("cuboid dimensions must be positive")
        if not 0.0 <= self.reflectance <= 1.0:
            raise ValueError("reflectance outside [0, 1]")
        if any(not 0.0 <= c <= 1.0 for c in self.color):
            raise ValueError("color outside [0, 1]")

    def footprint(self) -> np.ndarray:
        """(4, 2) ground-plane corners."""
        length, width, _ = self.dimensions
        c, s = math.cos(math.radians(self.yaw)), math.sin(math.radians(self.yaw))
        local = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=np.float64) * [length / 2, width / 2]
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center)


class CarSpec(Cuboid):
    @property
    def is_black(self) -> bool:
        return self.reflectance <= BLACK_MAX_REFLECTANCE and max(self.color) <= BLACK_MAX_RGB


@dataclass(frozen=True)
class SceneParams:
    car_count_range: tuple[int, int] = (1, 4)
    black_car_probability: float = 0.3
    distance_range: tuple[float, float] = (8.0, 30.0)
    max_abs_azimuth: float = 50.0
    wall_count_range: tuple[int, int] = (0, 2)
    max_retries: int = 1000

    def __post_init__(self):
        lo, hi = self.car_count_range
        if not 0 <= lo <= hi:
            raise ValueError("car_count_range must satisfy 0 <= min <= max")
        if not 0.0 <= self.black_car_probability <= 1.0:
            raise ValueError("black_car_probability outside [0, 1]")
        if not 0 < self.distance_range[0] < self.distance_range[1]:
            raise ValueError("distance_range must be increasing and positive")
        if not 0 < self.max_abs_azimuth < 90:
            raise ValueError("max_abs_azimuth must be in (0, 90)")

    def to_text(self) -> str:
        return (f"cars={self.car_count_range[0]}-{self.car_count_range[1]};black={self.black_car_probability!r};"
                f"dist={self.distance_range[0]!r}-{self.distance_range[1]!r};az={self.max_abs_azimuth!r};"
                f"walls={self.wall_count_range[0]}-{self.wall_count_range[1]};retries={self.max_retries}")

    @classmethod
    def from_text(cls, text: str) -> "SceneParams":
        kv = dict(item.split("=", 1) for item in text.split(";") if item)

        def pair(s, conv):
            a, b = s.split("-")
            return conv(a), conv(b)

        return cls(car_count_range=pair(kv["cars"], int), black_car_probability=float(kv["black"]),
                   distance_range=pair(kv["dist"], float), max_abs_azimuth=float(kv["az"]),
                   wall_count_range=pair(kv["walls"], int), max_retries=int(kv["retries"]))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    cars: tuple[CarSpec, ...] = ()
    walls: tuple[Cuboid, ...] = ()
    ground_reflectance: float = 0.3
    ground_color: tuple[float, float, float] = (0.42, 0.42, 0.42)
    background_color: tuple[float, float, float] = SKY_COLOR
    sensor_height: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "cars", tuple(self.cars))
        object.__setattr__(self, "walls", tuple(self.walls))
        if self.sensor_height <= 0:
            raise ValueError("sensor_height must be positive")
        if not 0.0 <= self.ground_reflectance <= 1.0:
            raise ValueError("ground_reflectance outside [0, 1]")
        for i in range(len(self.cars)):
            for j in range(i + 1, len(self.cars)):
                if footprints_overlap(self.cars[i].footprint(), self.cars[j].footprint()):
                    raise ValueError(f"cars {i} and {j} overlap")

    @property
    def objects(self) -> tuple[Cuboid, ...]:
        """Ray-cast order: cars first, then walls (box id b + 1 in kernel output)."""
        return self.cars + self.walls

    def box_table(self) -> np.ndarray:
        rows = []
        for obj in self.objects:
            length, width, height = obj.dimensions
            yaw = math.radians(obj.yaw)
            cz = -self.sensor_height + height / 2
            rows.append((obj.center[0], obj.center[1], cz, length / 2, width / 2, height / 2,
                         math.cos(yaw), math.sin(yaw)))
        return np.array(rows, dtype=np.float64).reshape(-1, kernels.BOX_FIELDS)


@dataclass(frozen=True)
class CarBox:
    car_index: int
    bbox: tuple[int, int, int, int]  # u0, v0, u1, v1 (exclusive upper bounds)
    color: tuple[float, float, float]
    is_black: bool


@dataclass(frozen=True)
class SceneMeta:
    boxes: tuple[CarBox, ...] = ()
    width: int = 0
    height: int = 0

    @property
    def n_g(self) -> int:
        return len(self.boxes)


def footprints_overlap(a: np.ndarray, b: np.ndarray, margin: float = 0.0) -> bool:
    """Separating-axis test for two convex ground polygons."""
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        for ex, ey in edges:
            axis = np.array([-ey, ex])
            axis /= np.hypot(*axis)
            pa, pb = a @ axis, b @ axis
            if pa.max() + margin < pb.min() or pb.max() + margin < pa.min():
                return False
    return True


# --- generation -------------------------------------------------------------

def generate_scene(seed: int, params: SceneParams | None = None, cfg: SensorConfig | None = None) -> SceneSpec:
    """Random scene, a pure function of ``(seed, params, cfg)``."""
    params = params or SceneParams()
    cfg = cfg or SensorConfig()
    _check_bounds(params, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))

    n_cars = int(rng.integers(params.car_count_range[0], params.car_count_range[1] + 1))
    ground = float(rng.uniform(0.38, 0.46))
    cars: list[CarSpec] = []
    retries = 0
    while len(cars) < n_cars:
        if retries >= params.max_retries:
            raise SceneGenerationError(
                f"could not place {n_cars} cars without overlap after {retries} retries; "
                "lower car_count_range or widen the placement bounds")
        dist = rng.uniform(*params.distance_range)
        az = math.radians(rng.uniform(-params.max_abs_azimuth, params.max_abs_azimuth))
        length, width, height = rng.uniform(3.8, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7)
        yaw = rng.uniform(0.0, 180.0)
        if rng.random() < params.black_car_probability:
            _, color, refl = BLACK_PAINT
        else:
            _, color, refl = CAR_PALETTE[int(rng.integers(len(CAR_PALETTE)))]
        car = CarSpec((dist * math.cos(az), dist * math.sin(az)), yaw, (length, width, height), color, refl)
        if any(footprints_overlap(car.footprint(), other.footprint(), margin=0.5) for other in cars):
            retries += 1
            continue
        cars.append(car)

    walls = []
    for _ in range(int(rng.integers(params.wall_count_range[0], params.wall_count_range[1] + 1))):
        x = params.distance_range[1] + rng.uniform(12.0, 30.0)
        y = x * math.tan(math.radians(rng.uniform(-45.0, 45.0)))
        walls.append(Cuboid((x, y), 0.0, (1.0, rng.uniform(8.0, 20.0), rng.uniform(3.0, 8.0)),
                            WALL_COLOR, WALL_REFLECTANCE))
    return SceneSpec(seed=int(seed), cars=tuple(cars), walls=tuple(walls), ground_reflectance=0.3,
                     ground_color=(ground, ground, ground))


def _check_bounds(params: SceneParams, cfg: SensorConfig) -> None:
    if params.max_abs_azimuth >= cfg.h_fov / 2:
        raise ValueError("placement azimuth bound exceeds the sensor's horizontal FOV")
    # ground contact straight below the nearest placement must be inside the vertical FOV
    nearest_el = math.degrees(math.atan2(1.5, params.distance_range[0]))
    if nearest_el >= cfg.v_fov / 2:
        raise ValueError("nearest placement distance puts the ground contact below the vertical FOV")


# --- sensors ----------------------------------------------------------------

def lidar_ray_grid(cfg: SensorConfig, subsample: int = 1):
    """Directions (H, W, 3) of the scanner's rays at the given subsampling."""
    w, h = cfg.ray_grid_shape(subsample)
    az, el = bin_centers(cfg, w, h)
    return direction_vectors(az[None, :], el[:, None])


def scan(scene: SceneSpec, cfg: SensorConfig, subsample: int = 1, frame_id: int = 0):
    """Single-return scan plus the object id each point came from (0 = ground)."""
    dirs = lidar_ray_grid(cfg, subsample).reshape(-1, 3)
    t, hit, cos_inc = kernels.raycast(dirs, scene.box_table(), -scene.sensor_height, cfg.min_range)
    keep = (hit >= 0) & (t <= cfg.max_range)
    material = np.concatenate([[scene.ground_reflectance], [o.reflectance for o in scene.objects]])
    # Lambertian return: material reflectivity scaled by the incidence cosine
    refl = material[hit[keep]] * np.maximum(0.0, cos_inc[keep])
    xyz = dirs[keep] * t[keep, None]
    return PointCloud(xyz, np.clip(refl, 0.0, 1.0), frame_id), hit[keep]


def simulate_lidar(scene: SceneSpec, cfg: SensorConfig, subsample: int = 1, frame_id: int = 0) -> PointCloud:
    """Points are ordered row-major over the ray grid; rays without a hit in range yield nothing."""
    return scan(scene, cfg, subsample, frame_id)[0]


def render_ids(scene: SceneSpec, cfg: SensorConfig, size: tuple[int, int]) -> np.ndarray:
    """(H, W) object id per pixel: -1 sky, 0 ground, b + 1 for ``scene.objects[b]``."""
    w, h = size
    az, el = bin_centers(cfg, w, h)
    dirs = direction_vectors(az[None, :], el[:, None]).reshape(-1, 3)
    _, hit, _ = kernels.raycast(dirs, scene.box_table(), -scene.sensor_height, 1e-9)
    return hit.reshape(h, w)


def render_camera(scene: SceneSpec, size: tuple[int, int], cfg: SensorConfig | None = None):
    """Flat-shaded RGB view from the sensor origin, plus the car ground truth.

    Colors are snapped to the 8-bit grid so the PNG written by the dataset
    builder reads back bit-identically.
    """
    cfg = cfg or SensorConfig()
    w, h = size
    if w < MIN_SIDE or h < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}")
    ids = render_ids(scene, cfg, size)
    palette = np.array([scene.background_color, scene.ground_color] + [o.color for o in scene.objects],
                       dtype=np.float64)
    rgb = palette[ids + 1]
    rgb = np.round(rgb * 255.0).astype(np.float32) / np.float32(255.0)
    image = RasterImage(rgb.transpose(2, 0, 1))
    return image, scene_meta(scene, ids)


def scene_meta(scene: SceneSpec, ids: np.ndarray) -> SceneMeta:
    h, w = ids.shape
    boxes = []
    for k, car in enumerate(scene.cars):
        mask = ids == k + 1
        if not mask.any():
            continue
        full = mask_bbox(mask)
        labels, n = ndimage.label(mask)
        sizes = np.bincount(labels.ravel())[1:]
        piece = labels == int(np.argmax(sizes)) + 1
        if sizes.max() < MIN_VISIBLE_AREA or box_iou(mask_bbox(piece), full) < MIN_PIECE_IOU:
            continue
        boxes.append(CarBox(k, full, tuple(float(c) for c in car.color), car.is_black))
    return SceneMeta(tuple(boxes), w, h)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def box_iou(a, b) -> float:
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


# --- text formats -----------------------------------------------------------

def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def _cuboid_line(obj: Cuboid) -> str:
    return _fmt([*obj.center, obj.yaw, *obj.dimensions, *obj.color, obj.reflectance])


def _parse_cuboid(text: str, cls):
    v = _floats(text)
    if len(v) != 10:
        raise ValueError(f"cuboid line needs 10 values, got {len(v)}")
    return cls((v[0], v[1]), v[2], (v[3], v[4], v[5]), (v[6], v[7], v[8]), v[9])


def scene_to_text(scene: SceneSpec) -> str:
    lines = [f"seed={scene.seed}", f"sensor_height={scene.sensor_height!r}",
             f"ground_reflectance={scene.ground_reflectance!r}",
             f"ground_color={_fmt(scene.ground_color)}", f"background_color={_fmt(scene.background_color)}"]
    lines += [f"car={_cuboid_line(c)}" for c in scene.cars]
    lines += [f"wall={_cuboid_line(wl)}" for wl in scene.walls]
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> SceneSpec:
    fields_: dict[str, str] = {}
    cars, walls = [], []
    for ln in text.splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        key, _, value = ln.partition("=")
        if key == "car":
            cars.append(_parse_cuboid(value, CarSpec))
        elif key == "wall":
            walls.append(_parse_cuboid(value, Cuboid))
        else:
            fields_[key] = value
    return SceneSpec(seed=int(fields_["seed"]), cars=tuple(cars), walls=tuple(walls),
                     ground_reflectance=float(fields_["ground_reflectance"]),
                     ground_color=tuple(_floats(fields_["ground_color"])),
                     background_color=tuple(_floats(fields_["background_color"])),
                     sensor_height=float(fields_["sensor_height"]))


def meta_to_text(meta: SceneMeta) -> str:
    lines = [f"width={meta.width}", f"height={meta.height}", f"n_g={meta.n_g}"]
    for b in meta.boxes:
        lines.append(f"car={b.car_index},{','.join(str(v) for v in b.bbox)},{_fmt(b.color)},{int(b.is_black)}")
    return "\n".join(lines) + "\n"


def meta_from_text(text: str) -> SceneMeta:
    kv: dict[str, str] = {}
    boxes = []
    for ln in text.splitlines():
        if not ln.strip():
            continue
        key, sep, value = ln.partition("=")
        if not sep:
            raise ValueError(f"malformed meta line {ln!r}")
        if key == "car":
            v = value.split(",")
            if len(v) != 9:
                raise ValueError(f"car line needs 9 fields, got {len(v)}")
            boxes.append(CarBox(int(v[0]), tuple(int(x) for x in v[1:5]), tuple(float(x) for x in v[5:8]),
                                bool(int(v[8]))))
        else:
            kv[key] = value
    meta = SceneMeta(tuple(boxes), int(kv["width"]), int(kv["height"]))
    if int(kv["n_g"]) != meta.n_g:
        raise ValueError(f"n_g={kv['n_g']} but {meta.n_g} car boxes listed")
    return meta


def save_scene(path, scene: SceneSpec) -> None:
    Path(path).write_text(scene_to_text(scene))


def load_scene(path) -> SceneSpec:
    return scene_from_text(Path(path).read_text())
