"""Chamfer distance, voxel IoU and the pixel-wise object removal (POR) score."""

from __future__ import annotations

import csv
import warnings

import numpy as np

from layercut.mesh import TriMesh, is_closed
from layercut.tetgrid import MeshDistance, sample_surface, winding_number

DEFAULT_SAMPLES = 100_000
DEFAULT_IOU_RESOLUTION = 128
EVAL_VIEWS = 30


def chamfer(a: TriMesh, b: TriMesh, samples: int = DEFAULT_SAMPLES, seed=0, units_to_cm: float = 1.0) -> float:
    """Symmetric mean point-to-surface distance, scaled to centimeters.

    ``seed`` may be an int or a pair (seed for samples on a, seed for samples on b);
    an int s means (s, s + 1).
    """
    if a.is_empty or b.is_empty:
        raise ValueError("chamfer needs two non-empty meshes")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    sa, sb = (seed, seed + 1) if np.isscalar(seed) else seed
    pa, _ = sample_surface(a, samples, np.random.default_rng(sa))
    pb, _ = sample_surface(b, samples, np.random.default_rng(sb))
    d_ab = MeshDistance(b).unsigned(pa)
    d_ba = MeshDistance(a).unsigned(pb)
    return float(0.5 * (d_ab.mean() + d_ba.mean()) * units_to_cm)


# ------------------------------------------------------------------ voxels


def _column_parity(mesh: TriMesh, xs, ys, zs) -> np.ndarray:
    """Inside/outside at grid points by counting +z ray crossings per (x, y) column."""
    nx, ny, nz = len(xs), len(ys), len(zs)
    occ = np.zeros((nx, ny, nz), dtype=bool)
    tri = mesh.vertices[mesh.faces]
    # tiny irrational shift keeps columns off shared edges and vertices
    jx, jy = 1e-7 * np.sqrt(2.0), 1e-7 * np.sqrt(3.0)
    dx, dy = xs[1] - xs[0] if nx > 1 else 1.0, ys[1] - ys[0] if ny > 1 else 1.0
    lo = tri[:, :, :2].min(axis=1)
    hi = tri[:, :, :2].max(axis=1)
    i0 = np.clip(np.ceil((lo[:, 0] - xs[0] - jx) / dx), 0, nx).astype(np.int64)
    i1 = np.clip(np.floor((hi[:, 0] - xs[0] - jx) / dx), -1, nx - 1).astype(np.int64)
    k0 = np.clip(np.ceil((lo[:, 1] - ys[0] - jy) / dy), 0, ny).astype(np.int64)
    k1 = np.clip(np.floor((hi[:, 1] - ys[0] - jy) / dy), -1, ny - 1).astype(np.int64)
    cx = np.maximum(i1 - i0 + 1, 0)
    cy = np.maximum(k1 - k0 + 1, 0)
    count = cx * cy
    keep = np.flatnonzero(count)
    if len(keep) == 0:
        return occ
    face = np.repeat(keep, count[keep])
    start = np.repeat(np.cumsum(count[keep]) - count[keep], count[keep])
    local = np.arange(len(face)) - start
    ci = i0[face] + local // cy[face]
    ck = k0[face] + local % cy[face]
    px = xs[ci] + jx
    py = ys[ck] + jy
    t = tri[face]
    ax, ay, bx, by, qx, qy = t[:, 0, 0], t[:, 0, 1], t[:, 1, 0], t[:, 1, 1], t[:, 2, 0], t[:, 2, 1]
    den = (by - qy) * (ax - qx) + (qx - bx) * (ay - qy)
    ok = den != 0
    den = np.where(ok, den, 1.0)
    w0 = ((by - qy) * (px - qx) + (qx - bx) * (py - qy)) / den
    w1 = ((qy - ay) * (px - qx) + (ax - qx) * (py - qy)) / den
    w2 = 1 - w0 - w1
    hit = ok & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    z = w0 * t[:, 0, 2] + w1 * t[:, 1, 2] + w2 * t[:, 2, 2]
    ci, ck, z = ci[hit], ck[hit], z[hit]
    # crossing at z flips parity for every sample above it
    first = np.searchsorted(zs, z, side="right")
    flips = np.zeros((nx, ny, nz + 1), dtype=np.int64)
    np.add.at(flips, (ci, ck, first), 1)
    occ[:] = (np.cumsum(flips, axis=2)[:, :, :nz] % 2).astype(bool)
    return occ


def occupancy(mesh: TriMesh, xs, ys, zs) -> np.ndarray:
    """Boolean occupancy at the grid points xs × ys × zs (indexing ij)."""
    if mesh.is_empty:
        return np.zeros((len(xs), len(ys), len(zs)), dtype=bool)
    if is_closed(mesh):
        return _column_parity(mesh, np.asarray(xs, float), np.asarray(ys, float), np.asarray(zs, float))
    warnings.warn("mesh is not closed; falling back to winding-number occupancy", RuntimeWarning, stacklevel=2)
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    return (winding_number(mesh, pts) > 0.5).reshape(len(xs), len(ys), len(zs))


def voxel_iou(a: TriMesh, b: TriMesh, resolution: int = DEFAULT_IOU_RESOLUTION) -> float:
    """IoU of occupancies sampled at voxel centers of the shared bounding box."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    present = [m.vertices for m in (a, b) if not m.is_empty]
    if not present:
        raise ValueError("both meshes are empty")
    pts = np.concatenate(present)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    step = (hi - lo) / resolution
    step = np.where(step > 0, step, 1.0)
    axes = [lo[i] + (np.arange(resolution) + 0.5) * step[i] for i in range(3)]
    occ_a = occupancy(a, *axes)
    occ_b = occupancy(b, *axes)
    union = np.count_nonzero(occ_a | occ_b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(occ_a & occ_b) / union)


# ---------------------------------------------------------------------- POR


def por_score(input_views, edited_views) -> float:
    """Mean over cameras of |edited ∧ input| / |input|, skipping empty input masks.

    Both arguments are sequences of (camera, mask) with matching cameras.
    """
    if len(input_views) != len(edited_views):
        raise ValueError("input and edited view lists differ in length")
    ratios = []
    for (cam_a, m_in), (cam_b, m_ed) in zip(input_views, edited_views):
        if cam_a != cam_b:
            raise ValueError("input and edited views use different cameras")
        m_in = np.asarray(m_in) > 0
        m_ed = np.asarray(m_ed) > 0
        if m_in.shape != m_ed.shape:
            raise ValueError(f"mask shapes differ: {m_in.shape} vs {m_ed.shape}")
        n = np.count_nonzero(m_in)
        if n == 0:
            continue
        ratios.append(np.count_nonzero(m_ed & m_in) / n)
    if not ratios:
        raise ValueError("every input target mask is empty")
    return float(np.mean(ratios))


def write_metrics_csv(rows, path, config_hash: str) -> None:
    """rows: iterable of (metric, value). Values are written with repr-exact formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "config_hash"])
        for name, value in rows:
            w.writerow([name, repr(float(value)), config_hash])


def read_metrics_csv(path) -> dict:
    with open(path, newline="") as fh:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(fh)}
