"""Time the ray caster and z-buffer under numba and under plain numpy.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--subsample 1]

Both backends are called directly, so the ``L2P_NUMBA`` flag does not matter
here.  The first numba call (compilation or cache load) is excluded.
"""

import argparse
import time

import numpy as np

from lidar2photo import _accel, kernels
from lidar2photo.lidar_model import SensorConfig, spherical_arrays
from lidar2photo.projection import pixel_arrays
from lidar2photo.scene import generate_scene, lidar_ray_grid, simulate_lidar


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timed runs per case (default: %(default)s)")
    ap.add_argument("--subsample", type=int, default=1, help="ray grid subsampling (default: %(default)s)")
    args = ap.parse_args()

    cfg = SensorConfig()
    scene = generate_scene(7)
    dirs = lidar_ray_grid(cfg, args.subsample).reshape(-1, 3)
    boxes = scene.box_table()
    cloud = simulate_lidar(scene, cfg, args.subsample)
    az, el, rng = spherical_arrays(cloud.xyz, cloud.ranges)
    u, v, valid = pixel_arrays(az, el, rng, cfg, (256, 256))
    pix = np.where(valid, v * 256 + u, -1)

    cases = {
        f"raycast {len(dirs)} rays x {len(boxes)} boxes": (
            lambda: kernels.raycast_jit(dirs, boxes, -1.5, 0.1),
            lambda: kernels._raycast_numpy(dirs, boxes, -1.5, 0.1)),
        f"zbuffer {len(pix)} points -> 256x256": (
            lambda: kernels.zbuffer_jit(pix, rng, 256 * 256),
            lambda: kernels._zbuffer_numpy(pix, rng, 256 * 256)),
    }
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; the 'numba' column runs the plain loops")
    print(f"{'case':<44} {'numba (ms)':>11} {'numpy (ms)':>11} {'speedup':>8}")
    for name, (fast, ref) in cases.items():
        fast()  # compile / load cache
        t_fast, t_ref = best_of(fast, args.repeat), best_of(ref, args.repeat)
        print(f"{name:<44} {t_fast * 1e3:>11.2f} {t_ref * 1e3:>11.2f} {t_ref / t_fast:>7.1f}x")


if __name__ == "__main__":
    main()
