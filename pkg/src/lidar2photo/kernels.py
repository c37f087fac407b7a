"""Hot inner loops: ray casting against ground + yawed boxes, and z-buffer scatter.

Each kernel has a loop form (compiled by numba when enabled) and a vectorized
numpy form.  Both follow the same arithmetic and the same tie rules, so they
agree to the last bit on the platforms we test; the public names at the bottom
point at whichever backend ``L2P_NUMBA`` selects.
"""

import numpy as np

from ._accel import njit, select

# Box rows: cx, cy, cz, half_length, half_width, half_height, cos(yaw), sin(yaw)
BOX_FIELDS = 8
_PARALLEL_EPS = 1e-15


def _raycast_loop(dirs, boxes, ground_z, t_min):
    n = dirs.shape[0]
    k = boxes.shape[0]
    t_out = np.full(n, np.inf)
    hit_out = np.full(n, -1, dtype=np.int64)
    cos_out = np.zeros(n)
    for i in range(n):
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        best_t = np.inf
        best_id = -1
        best_cos = 0.0
        if dz < 0.0:
            tg = ground_z / dz
            if tg >= t_min and tg < best_t:
                best_t = tg
                best_id = 0
                best_cos = -dz
        for b in range(k):
            c = boxes[b, 6]
            s = boxes[b, 7]
            wx = 0.0 - boxes[b, 0]
            wy = 0.0 - boxes[b, 1]
            wz = 0.0 - boxes[b, 2]
            ox = c * wx + s * wy
            oy = -s * wx + c * wy
            oz = wz
            lx = c * dx + s * dy
            ly = -s * dx + c * dy
            lz = dz
            t_enter = -np.inf
            t_exit = np.inf
            enter_cos = 0.0
            missed = False
            for a in range(3):
                if a == 0:
                    o = ox
                    d = lx
                    h = boxes[b, 3]
                elif a == 1:
                    o = oy
                    d = ly
                    h = boxes[b, 4]
                else:
                    o = oz
                    d = lz
                    h = boxes[b, 5]
                if abs(d) < _PARALLEL_EPS:
                    if abs(o) > h:
                        missed = True
                    continue
                t1 = (-h - o) / d
                t2 = (h - o) / d
                near = min(t1, t2)
                far = max(t1, t2)
                if near > t_enter:
                    t_enter = near
                    enter_cos = abs(d)
                if far < t_exit:
                    t_exit = far
            if missed or t_enter > t_exit or t_enter < t_min:
                continue
            if t_enter < best_t:
                best_t = t_enter
                best_id = b + 1
                best_cos = enter_cos
        t_out[i] = best_t
        hit_out[i] = best_id
        cos_out[i] = best_cos
    return t_out, hit_out, cos_out


def _raycast_numpy(dirs, boxes, ground_z, t_min):
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    k = boxes.shape[0]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    ts = np.full((k + 1, n), np.inf)
    coss = np.zeros((k + 1, n))

    down = dz < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(down, ground_z / np.where(down, dz, -1.0), np.inf)
    ok = down & (tg >= t_min)
    ts[0] = np.where(ok, tg, np.inf)
    coss[0] = np.where(ok, -dz, 0.0)

    for b in range(k):
        cx, cy, cz, hl, hw, hh, c, s = boxes[b]
        wx, wy, wz = 0.0 - cx, 0.0 - cy, 0.0 - cz
        origin = (c * wx + s * wy, -s * wx + c * wy, wz)
        local = (c * dx + s * dy, -s * dx + c * dy, dz)
        t_enter = np.full(n, -np.inf)
        t_exit = np.full(n, np.inf)
        enter_cos = np.zeros(n)
        missed = np.zeros(n, dtype=bool)
        for o, d, h in zip(origin, local, (hl, hw, hh)):
            par = np.abs(d) < _PARALLEL_EPS
            if abs(o) > h:
                missed |= par
            dsafe = np.where(par, 1.0, d)
            t1 = (-h - o) / dsafe
            t2 = (h - o) / dsafe
            near = np.where(par, -np.inf, np.minimum(t1, t2))
            far = np.where(par, np.inf, np.maximum(t1, t2))
            upd = near > t_enter
            t_enter = np.where(upd, near, t_enter)
            enter_cos = np.where(upd, np.abs(d), enter_cos)
            t_exit = np.minimum(t_exit, far)
        ok = ~missed & (t_enter <= t_exit) & (t_enter >= t_min)
        ts[b + 1] = np.where(ok, t_enter, np.inf)
        coss[b + 1] = np.where(ok, enter_cos, 0.0)

    best = np.argmin(ts, axis=0)
    cols = np.arange(n)
    t_out = ts[best, cols]
    hit_out = np.where(np.isfinite(t_out), best, -1).astype(np.int64)
    cos_out = np.where(hit_out >= 0, coss[best, cols], 0.0)
    return t_out, hit_out, cos_out


def _zbuffer_loop(pix, ranges, npix):
    winner = np.full(npix, -1, dtype=np.int64)
    for i in range(pix.shape[0]):
        p = pix[i]
        if p < 0:
            continue
        w = winner[p]
        if w < 0 or ranges[i] < ranges[w]:
            winner[p] = i
    return winner


def _zbuffer_numpy(pix, ranges, npix):
    winner = np.full(npix, -1, dtype=np.int64)
    idx = np.flatnonzero(pix >= 0)
    if idx.size == 0:
        return winner
    order = np.lexsort((idx, ranges[idx], pix[idx]))
    sorted_pix = pix[idx][order]
    first = np.ones(sorted_pix.size, dtype=bool)
    first[1:] = sorted_pix[1:] != sorted_pix[:-1]
    winner[sorted_pix[first]] = idx[order][first]
    return winner


raycast_jit = njit(_raycast_loop)
zbuffer_jit = njit(_zbuffer_loop)


def raycast(dirs, boxes, ground_z, t_min):
    """Nearest hit per ray from the origin.

    Args:
        dirs: (N, 3) unit directions.
        boxes: (K, 8) box table, see ``BOX_FIELDS``.
        ground_z: height of the ground plane (negative: below the sensor).
        t_min: hits closer than this are ignored.

    Returns:
        ``(t, hit_id, cos_incidence)``; ``hit_id`` is -1 for no hit, 0 for the
        ground and ``b + 1`` for box ``b``.  Exact ties go to the lower id.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, BOX_FIELDS)
    impl = select(raycast_jit, _raycast_numpy)
    return impl(dirs, boxes, float(ground_z), float(t_min))


def zbuffer(pix, ranges, npix):
    """Index of the nearest point per pixel (-1 where empty).

    ``pix`` holds flat pixel indices with -1 marking points to skip.  Equal
    ranges resolve to the lower point index.
    """
    pix = np.ascontiguousarray(pix, dtype=np.int64)
    ranges = np.ascontiguousarray(ranges, dtype=np.float64)
    impl = select(zbuffer_jit, _zbuffer_numpy)
    return impl(pix, ranges, int(npix))
