"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[criterion N] PASS|FAIL`` line to the terminal with the
measured values, then asserts.  Run just this file with::

    pytest tests/test_acceptance.py -v
"""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from lidar2photo import _accel, kernels
from lidar2photo.dataset import build_dataset, load_split, split
from lidar2photo.lidar_model import LidarPoint, PointCloud, SensorConfig, cartesian_to_spherical
from lidar2photo.metric import PairCounts, evaluate_run, score
from lidar2photo.pix2pix import (DiscriminatorConfig, GeneratorConfig, PatchDiscriminator, UNetGenerator,
                                 load_checkpoint, predict, preset, save_checkpoint, train)
from lidar2photo.projection import ChannelMode, pixel_of, project_frame, to_model_range
from lidar2photo.scene import generate_scene, render_camera, simulate_lidar
from oracles import face_oracle, micro_gradient_errors, naive_project, score_oracle

SEEDS = (0, 1, 2)


@pytest.fixture
def record(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(n, title, ok, detail):
        line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        return ok

    return emit


def test_criterion_1_metric_oracle(record, rng):
    t0 = time.perf_counter()
    exact = score([PairCounts(2, 4), PairCounts(3, 3)]).score == 0.75
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(1, 12))
        c = list(zip(rng.integers(0, 6, n).tolist(), rng.integers(1, 6, n).tolist()))
        worst = max(worst, abs(score([PairCounts(*x) for x in c]).score - score_oracle(c)))
    elapsed = time.perf_counter() - t0
    ok = exact and worst <= 1e-12 and elapsed < 1.0
    record(1, "metric oracle", ok, f"fixed example exact={exact}, max error {worst:.1e} over 10^4 lists, "
                                   f"{elapsed:.2f} s")
    assert ok


def test_criterion_2_projection_oracle(record, rng):
    cfg = SensorConfig()
    t0 = time.perf_counter()
    identical = 0
    for k in range(100):
        n = 1000
        az, el = np.radians(rng.uniform(-70, 70, n)), np.radians(rng.uniform(-16, 16, n))
        r = rng.uniform(0.05, 300, n)
        xyz = np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)], axis=1)
        cloud = PointCloud(xyz, rng.uniform(0, 1, n))
        mode = ChannelMode.REFLECTANCE_DISTANCE if k % 2 else ChannelMode.REFLECTANCE
        got = project_frame(cloud, cfg, mode, (64, 64)).data
        identical += got.tobytes() == naive_project(xyz, cloud.reflectance, cfg, mode.channels, 64, 64).tobytes()
    mismatches = 0
    for p in rng.uniform(-50, 50, (10_000, 3)):
        x, y, z = (float(v) for v in p)
        s = cartesian_to_spherical(LidarPoint(x, y, z, 0.0))
        rr = math.sqrt(x * x + y * y + z * z)
        a, e = math.degrees(math.atan2(y, x)), math.degrees(math.asin(z / rr))
        if abs(a) < 57.5 and abs(e) < 12.5 and 0.1 <= rr <= 250:
            expected = (min(math.floor((57.5 - a) / 115 * 1150), 1149), min(math.floor((12.5 - e) / 25 * 250), 249))
        else:
            expected = None
        mismatches += pixel_of(s, cfg, (1150, 250)) != expected
    elapsed = time.perf_counter() - t0
    ok = identical == 100 and mismatches == 0 and elapsed < 10
    record(2, "projection oracle", ok, f"{identical}/100 rasters bit-identical, {mismatches} pixel mismatches "
                                       f"in 10^4 points, {elapsed:.2f} s")
    assert ok


def test_criterion_3_geometry_oracle(record, rng):
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        yaw = rng.uniform(0, 2 * math.pi)
        box = np.array([rng.uniform(5, 60), rng.uniform(-20, 20), rng.uniform(-1, 1), *rng.uniform(0.3, 3, 3),
                        math.cos(yaw), math.sin(yaw)])
        loc = rng.uniform(-0.99, 0.99, 3) * box[3:6]
        target = np.array([box[0] + box[6] * loc[0] - box[7] * loc[1],
                           box[1] + box[7] * loc[0] + box[6] * loc[1], box[2] + loc[2]])
        d = target / np.linalg.norm(target)
        t, hit, _ = kernels.raycast(d[None], box[None], -100.0, 0.0)
        worst = max(worst, abs(t[0] - face_oracle(d, box)) if hit[0] == 1 else math.inf)
    for _ in range(500):
        e, a, h = math.radians(rng.uniform(-89, -0.5)), math.radians(rng.uniform(-60, 60)), rng.uniform(0.5, 3)
        d = np.array([[math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)]])
        t, hit, _ = kernels.raycast(d, np.zeros((0, 8)), -h, 0.0)
        worst = max(worst, abs(t[0] - h / math.sin(-e)) if hit[0] == 0 else math.inf)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 10
    record(3, "simulator geometry oracle", ok, f"max range error {worst:.1e} m over 10^3 cases "
                                               f"({_accel.backend_name()} backend), {elapsed:.2f} s")
    assert ok


def test_criterion_4_gradient_check(record):
    t0 = time.perf_counter()
    g_err, d_err = micro_gradient_errors(n_directions=10, seed=0)
    elapsed = time.perf_counter() - t0
    ok = g_err < 1e-3 and d_err < 1e-3 and elapsed < 300
    record(4, "gradient check", ok, f"max relative error generator loss {g_err:.1e}, discriminator loss "
                                    f"{d_err:.1e} over 10 directions, {elapsed:.1f} s")
    assert ok


@pytest.mark.slow
def test_criterion_5_memorization(record):
    cfg = SensorConfig()
    scene = generate_scene(11)
    x = project_frame(simulate_lidar(scene, cfg, 4), cfg, ChannelMode.REFLECTANCE_DISTANCE, (64, 64))
    y, _ = render_camera(scene, (64, 64), cfg)
    results = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        ck = train([(x, y)], preset("exp2", epochs=2000, base_filters=32, seed=seed)).final
        mae = float(np.mean(np.abs(to_model_range(predict(ck, x)) - to_model_range(y))))
        results.append((seed, mae, time.perf_counter() - t0))
        if sum(m < 0.08 and t <= 900 for _, m, t in results) >= 2:
            break
    passes = sum(m < 0.08 and t <= 900 for _, m, t in results)
    ok = passes >= 2
    detail = ", ".join(f"seed {s}: MAE {m:.4f} in {t / 60:.1f} min" for s, m, t in results)
    record(5, "memorization smoke test", ok, f"{passes} seed(s) below 0.08 ({detail})")
    assert ok


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    manifest = split(build_dataset(250, 5000, root, mode="exp2", size=(64, 64), subsample=4), 0.2, seed=0)
    return load_split(manifest, "train"), load_split(manifest, "test")


@pytest.mark.slow
def test_criterion_6_desk_scale_exp2(record, desk_dataset):
    train_split, test_split = desk_dataset
    assert (len(train_split), len(test_split)) == (200, 50)
    pairs = [(s[1], s[2]) for s in train_split]
    t_start = time.perf_counter()
    runs = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        ck = train(pairs, preset("exp2", base_filters=32, seed=seed)).final
        report = evaluate_run(ck, test_split)
        runs.append((seed, report, time.perf_counter() - t0))
        if sum(r.score >= 0.6 for _, r, _ in runs) >= 2:
            break
    elapsed = time.perf_counter() - t_start
    passes = sum(r.score >= 0.6 for _, r, _ in runs)
    black_total = sum(r.black_total for _, r, _ in runs)
    black_found = sum(r.black_detected for _, r, _ in runs)
    black_rate = black_found / black_total if black_total else float("nan")
    ok = passes >= 2 and black_rate >= 0.5 and elapsed <= 7200
    detail = ", ".join(f"seed {s}: score {r.score:.3f} (m={r.m}, black {r.black_detected}/{r.black_total}) "
                       f"in {t / 60:.1f} min" for s, r, t in runs)
    record(6, "desk-scale experiment-2 analogue", ok,
           f"{passes} seed(s) with score >= 0.6, black cars detected {black_found}/{black_total} "
           f"({black_rate:.0%}), total {elapsed / 60:.1f} min; {detail}")
    assert ok


def _cli(args, env=None):
    return subprocess.run([sys.executable, "-m", "lidar2photo.cli", *args], capture_output=True, text=True,
                          env={**os.environ, **(env or {})}, check=True)


def _tree(root):
    import hashlib
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


def test_criterion_7_determinism(record, tmp_path):
    synth = ["synth", "--count", "8", "--seed", "3", "--size", "16"]
    _cli(synth + ["--out", str(tmp_path / "a")])
    _cli(synth + ["--out", str(tmp_path / "b")])
    synth_same = _tree(tmp_path / "a") == _tree(tmp_path / "b")

    strict = {"L2P_DETERMINISTIC": "1"}
    train_args = ["train", "--dataset", str(tmp_path / "a"), "--epochs", "3", "--base-filters", "4"]
    _cli(train_args + ["--out", str(tmp_path / "m1.l2ck")], strict)
    _cli(train_args + ["--out", str(tmp_path / "m2.l2ck")], strict)
    logs_same = (tmp_path / "m1.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()

    ck = load_checkpoint(tmp_path / "m1.l2ck")
    save_checkpoint(tmp_path / "m3.l2ck", ck)
    ckpt_same = (tmp_path / "m1.l2ck").read_bytes() == (tmp_path / "m3.l2ck").read_bytes() and \
        load_checkpoint(tmp_path / "m3.l2ck") == ck

    ok = synth_same and logs_same and ckpt_same
    record(7, "determinism", ok, f"synth rerun identical={synth_same}, strict-mode loss logs identical="
                                 f"{logs_same}, checkpoint round-trip identical={ckpt_same}")
    assert ok


def test_criterion_8_shapes(record):
    t0 = time.perf_counter()
    sides = {}
    with torch.no_grad():
        for size in (256, 64):
            disc = PatchDiscriminator(DiscriminatorConfig.for_image(5, size, 8))
            sides[size] = tuple(disc(torch.zeros(1, 2, size, size), torch.zeros(1, 3, size, size)).shape[2:])
        gen_shapes = {}
        for cin in (1, 2):
            gen = UNetGenerator(GeneratorConfig(cin, 3, 8, 6)).eval()
            gen_shapes[cin] = tuple(gen(torch.zeros(1, cin, 64, 64)).shape[1:])
    elapsed = time.perf_counter() - t0
    ok = sides == {256: (30, 30), 64: (6, 6)} and all(s == (3, 64, 64) for s in gen_shapes.values()) \
        and elapsed < 1.0
    record(8, "shape contracts", ok, f"patch maps {sides[256]} at 256 and {sides[64]} at 64, generator outputs "
                                     f"{gen_shapes[1]} (1-channel) and {gen_shapes[2]} (2-channel), {elapsed:.2f} s")
    assert ok
