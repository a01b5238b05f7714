"""Compiled inner loops over flat float arrays. Written scalar-style to avoid
per-triangle temporaries."""

import math

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@numba.njit(cache=True, inline="always")
def _ratio(a, b):
    # a / b with a / 0 -> 0; only hit by zero-length edges
    return a / b if b != 0.0 else 0.0


@numba.njit(cache=True)
def _closest_on_triangle(px, py, pz, t):
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    bx, by, bz = t[1, 0], t[1, 1], t[1, 2]
    cx, cy, cz = t[2, 0], t[2, 1], t[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    d1 = _dot(abx, aby, abz, px - ax, py - ay, pz - az)
    d2 = _dot(acx, acy, acz, px - ax, py - ay, pz - az)
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    d3 = _dot(abx, aby, abz, px - bx, py - by, pz - bz)
    d4 = _dot(acx, acy, acz, px - bx, py - by, pz - bz)
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        s = _ratio(d1, d1 - d3)
        return ax + abx * s, ay + aby * s, az + abz * s
    d5 = _dot(abx, aby, abz, px - cx, py - cy, pz - cz)
    d6 = _dot(acx, acy, acz, px - cx, py - cy, pz - cz)
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        s = _ratio(d2, d2 - d6)
        return ax + acx * s, ay + acy * s, az + acz * s
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        s = _ratio(d4 - d3, (d4 - d3) + (d5 - d6))
        return bx + (cx - bx) * s, by + (cy - by) * s, bz + (cz - bz) * s
    den = va + vb + vc
    if den == 0.0:
        return ax, ay, az
    v = vb / den
    w = vc / den
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@numba.njit(cache=True)
def closest_over_candidates(points, tri, offsets, cand):
    """For point i, scan faces cand[offsets[i]:offsets[i+1]] and keep the closest."""
    n = points.shape[0]
    dist = np.full(n, np.inf)
    face = np.full(n, -1, dtype=np.int64)
    closest = np.zeros((n, 3))
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        for j in range(offsets[i], offsets[i + 1]):
            f = cand[j]
            qx, qy, qz = _closest_on_triangle(px, py, pz, tri[f])
            d = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
            if d < best:
                best = d
                face[i] = f
                closest[i, 0], closest[i, 1], closest[i, 2] = qx, qy, qz
        dist[i] = math.sqrt(best)
    return dist, closest, face


@numba.njit(cache=True, parallel=False)
def winding_numbers(points, tri):
    n = points.shape[0]
    out = np.zeros(n)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        total = 0.0
        for f in range(tri.shape[0]):
            ax, ay, az = tri[f, 0, 0] - px, tri[f, 0, 1] - py, tri[f, 0, 2] - pz
            bx, by, bz = tri[f, 1, 0] - px, tri[f, 1, 1] - py, tri[f, 1, 2] - pz
            cx, cy, cz = tri[f, 2, 0] - px, tri[f, 2, 1] - py, tri[f, 2, 2] - pz
            la = math.sqrt(ax * ax + ay * ay + az * az)
            lb = math.sqrt(bx * bx + by * by + bz * bz)
            lc = math.sqrt(cx * cx + cy * cy + cz * cz)
            det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            den = (la * lb * lc + _dot(ax, ay, az, bx, by, bz) * lc
                   + _dot(bx, by, bz, cx, cy, cz) * la + _dot(cx, cy, cz, ax, ay, az) * lb)
            total += 2.0 * math.atan2(det, den)
        out[i] = total / (4.0 * math.pi)
    return out


@numba.njit(cache=True)
def closest_with_pruning(points, tri, centroids, radius, best, closest, face):
    """Refine (best, closest, face) in place by scanning every face whose
    bounding sphere (centroid, radius) can still beat the current best."""
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        b = best[i]
        b2 = b * b
        for f in range(tri.shape[0]):
            dc = math.sqrt((px - centroids[f, 0]) ** 2 + (py - centroids[f, 1]) ** 2 + (pz - centroids[f, 2]) ** 2)
            if dc - radius[f] >= b:
                continue
            qx, qy, qz = _closest_on_triangle(px, py, pz, tri[f])
            d2 = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
            if d2 < b2:
                b2 = d2
                b = math.sqrt(d2)
                face[i] = f
                closest[i, 0], closest[i, 1], closest[i, 2] = qx, qy, qz
        best[i] = b
