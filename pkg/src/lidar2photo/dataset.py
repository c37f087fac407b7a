"""Paired (LiDAR raster, camera image) datasets on disk.

Layout under the output directory::

    manifest.txt
    pairs/<id>.l2ri   input raster (1 or 2 channels)
    pairs/<id>.png    target image, 8-bit RGB
    pairs/<id>.meta   car ground truth, key=value text
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .lidar_model import SensorConfig
from .projection import ChannelMode, RasterFormatError, RasterImage, project_frame, read_png, read_raster, \
    write_png, write_raster
from .scene import SceneMeta, SceneParams, generate_scene, meta_from_text, meta_to_text, render_camera, \
    simulate_lidar

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.txt"
UNASSIGNED = "-"
SPLITS = ("train", "test")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class PairedSample:
    id: str
    seed: int
    input_path: str
    target_path: str
    meta_path: str
    split: str = UNASSIGNED


@dataclass(frozen=True)
class DatasetManifest:
    mode: ChannelMode
    width: int
    height: int
    sensor: SensorConfig
    subsample: int
    seed: int
    scene_params: SceneParams
    entries: tuple[PairedSample, ...]
    root: Path = Path(".")
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate pair ids in manifest")
        for e in self.entries:
            if e.split not in SPLITS + (UNASSIGNED,):
                raise DatasetError(f"pair {e.id}: unknown split {e.split!r}")
        train_seeds = {e.seed for e in self.entries if e.split == "train"}
        if any(e.seed in train_seeds for e in self.entries if e.split == "test"):
            raise DatasetError("test pairs share scene seeds with training pairs")

    def select(self, split: str) -> list[PairedSample]:
        return [e for e in self.entries if e.split == split]

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME


def build_dataset(count: int, seed: int, out_dir, scene_params: SceneParams | None = None,
                  sensor: SensorConfig | None = None, mode=ChannelMode.REFLECTANCE_DISTANCE,
                  size: tuple[int, int] = (64, 64), subsample: int = 4) -> DatasetManifest:
    """Simulate ``count`` scenes (seeds ``seed + i``) and write every pair plus the manifest."""
    if count < 2:
        raise DatasetError("a dataset needs at least 2 pairs so both splits are non-empty")
    scene_params = scene_params or SceneParams()
    sensor = sensor or SensorConfig()
    mode = ChannelMode.parse(mode)
    root = Path(out_dir)
    pairs_dir = root / "pairs"
    try:
        pairs_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {pairs_dir}: {exc}") from exc

    entries = []
    for i in range(count):
        pair_seed = seed + i
        pid = f"{i:06d}"
        scene = generate_scene(pair_seed, scene_params, sensor)
        cloud = simulate_lidar(scene, sensor, subsample, frame_id=i)
        raster = project_frame(cloud, sensor, mode, size)
        target, meta = render_camera(scene, size, sensor)
        entry = PairedSample(pid, pair_seed, f"pairs/{pid}.l2ri", f"pairs/{pid}.png", f"pairs/{pid}.meta")
        try:
            write_raster(root / entry.input_path, raster)
            write_png(root / entry.target_path, target)
            (root / entry.meta_path).write_text(meta_to_text(meta))
        except OSError as exc:
            raise DatasetError(f"writing pair {pid}: {exc}") from exc
        entries.append(entry)
        if (i + 1) % 50 == 0:
            logger.info("built %d/%d pairs", i + 1, count)

    manifest = DatasetManifest(mode, size[0], size[1], sensor, subsample, seed, scene_params, tuple(entries), root)
    write_manifest(manifest)
    return manifest


def split(manifest: DatasetManifest, test_fraction: float, seed: int) -> DatasetManifest:
    """Seeded shuffle of whole scenes into train/test; both sides must be non-empty."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError("test_fraction must be strictly between 0 and 1")
    n = len(manifest.entries)
    n_test = int(round(n * test_fraction))
    if n_test == 0 or n_test == n:
        raise DatasetError(f"test_fraction {test_fraction} on {n} pairs leaves an empty split")
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(int(i) for i in order[:n_test])
    entries = tuple(replace(e, split="test" if i in test_idx else "train") for i, e in enumerate(manifest.entries))
    return replace(manifest, entries=entries)


def manifest_to_text(m: DatasetManifest) -> str:
    lines = ["# lidar2photo dataset manifest", f"version={m.version}", f"mode={m.mode.value}",
             f"width={m.width}", f"height={m.height}", f"sensor={m.sensor.to_text()}",
             f"subsample={m.subsample}", f"seed={m.seed}", f"scene_params={m.scene_params.to_text()}"]
    for e in m.entries:
        lines.append(f"pair={e.id},{e.seed},{e.split},{e.input_path},{e.target_path},{e.meta_path}")
    return "\n".join(lines) + "\n"


def write_manifest(m: DatasetManifest) -> Path:
    path = m.path
    try:
        path.write_text(manifest_to_text(m))
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
    kv: dict[str, str] = {}
    entries = []
    try:
        for ln in text.splitlines():
            if not ln.strip() or ln.startswith("#"):
                continue
            key, _, value = ln.partition("=")
            if key == "pair":
                pid, seed, sp, inp, tgt, meta = value.split(",")
                entries.append(PairedSample(pid, int(seed), inp, tgt, meta, sp))
            else:
                kv[key] = value
        if int(kv["version"]) != MANIFEST_VERSION:
            raise DatasetError(f"{path}: unsupported manifest version {kv['version']}")
        return DatasetManifest(ChannelMode.parse(kv["mode"]), int(kv["width"]), int(kv["height"]),
                               SensorConfig.from_text(kv["sensor"]), int(kv["subsample"]), int(kv["seed"]),
                               SceneParams.from_text(kv["scene_params"]), tuple(entries), path.parent)
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from exc


def load_pair(manifest: DatasetManifest, entry: PairedSample) -> tuple[RasterImage, RasterImage, SceneMeta]:
    root = manifest.root
    for rel in (entry.input_path, entry.target_path, entry.meta_path):
        if not (root / rel).is_file():
            raise DatasetError(f"pair {entry.id}: missing file {root / rel}")
    try:
        raster = read_raster(root / entry.input_path)
        target = read_png(root / entry.target_path)
    except RasterFormatError as exc:
        raise DatasetError(f"pair {entry.id}: {exc}") from exc
    meta_path = root / entry.meta_path
    try:
        meta = meta_from_text(meta_path.read_text())
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"pair {entry.id}: cannot parse {meta_path} ({exc})") from exc
    if raster.data.shape[1:] != target.data.shape[1:]:
        raise DatasetError(f"pair {entry.id}: input {raster.width}x{raster.height} vs "
                           f"target {target.width}x{target.height}")
    if raster.channels != manifest.mode.channels:
        raise DatasetError(f"pair {entry.id}: {raster.channels}-channel raster in a {manifest.mode.value} dataset")
    return raster, target, meta


def load_split(manifest: DatasetManifest, which: str):
    """List of ``(id, input, target, meta)`` for one split."""
    return [(e.id, *load_pair(manifest, e)) for e in manifest.select(which)]
