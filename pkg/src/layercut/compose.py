"""Put canonical layers on new bodies and push the human layer out of the object."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from layercut.decompose import Adam
from layercut.mesh import TriMesh, merge_meshes, vertex_normals
from layercut.raster import Camera, orbit_cameras, rasterize
from layercut.rig import Pose, Rig, lbs_forward

LAMBDA_DIS = 10.0
REFINE_STEPS = 200
REFINE_LR = 1e-3
VISIBILITY_VIEWS = 30


def visibility_cameras(n: int = VISIBILITY_VIEWS, size: int = 256) -> list[Camera]:
    return orbit_cameras(n, radius=3.0, elevation=0.0, fov=math.pi / 3, width=size, height=size)


def visible_vertices(mesh: TriMesh, cameras, occluder: TriMesh | None = None) -> np.ndarray:
    """Sorted indices of vertices with an incident face that wins some pixel.

    With ``occluder`` the two meshes are rasterized together and only this
    mesh's faces count.
    """
    cameras = list(cameras)
    if not cameras:
        raise ValueError("need at least one camera")
    if mesh.is_empty:
        return np.zeros(0, dtype=np.int64)
    scene = mesh if occluder is None or occluder.is_empty else merge_meshes(mesh, occluder)
    seen = np.zeros(mesh.n_faces, dtype=bool)
    for cam in cameras:
        fid = rasterize(scene, cam).face_id
        fid = fid[(fid >= 0) & (fid < mesh.n_faces)]
        seen[fid] = True
    return np.unique(mesh.faces[seen])


def _nn(tree: cKDTree, points: np.ndarray) -> np.ndarray:
    return tree.query(points)[1]


def penetration_mask(m_h: TriMesh, m_o: TriMesh, cameras=None, normals=None, reach: float | None = None,
                     visible=None) -> np.ndarray:
    """Human vertices whose direction to the nearest visible object vertex opposes their normal.

    Pass the pre-refinement normals to score a refined mesh the way the
    refinement sees it; the default recomputes normals from ``m_h``.
    """
    if m_h.is_empty or m_o.is_empty:
        return np.zeros(m_h.n_vertices, dtype=bool)
    if visible is None:
        visible = visible_vertices(m_o, cameras if cameras is not None else visibility_cameras())
    if len(visible) == 0:
        return np.zeros(m_h.n_vertices, dtype=bool)
    n_h = vertex_normals(m_h) if normals is None else normals
    targets = m_o.vertices[visible]
    u = targets[_nn(cKDTree(targets), m_h.vertices)] - m_h.vertices
    out = np.einsum("ij,ij->i", u, n_h) < 0
    if reach is not None:
        out &= np.linalg.norm(u, axis=1) <= reach
    return out


def penetration_count(m_h: TriMesh, m_o: TriMesh, cameras=None, normals=None, reach: float | None = None) -> int:
    return int(np.count_nonzero(penetration_mask(m_h, m_o, cameras, normals, reach)))


def refine_composition(m_h: TriMesh, m_o: TriMesh, lambda_dis: float = LAMBDA_DIS, steps: int = REFINE_STEPS,
                       lr: float = REFINE_LR, cameras=None, reach: float | None = None,
                       trace: list | None = None) -> TriMesh:
    """Move human vertices along their starting normals until they sit inside the object.

    Each human vertex v = v0 + d n gets a hinge penalty max(0, (v - o) . n) where
    o is its nearest visible object vertex; each object vertex o gets
    max(0, (h - o) . n_o) for its nearest human vertex h. Both sums are divided
    by the human vertex count so one Adam scale fits both.
    The displacement regularizer lambda_dis * mean(d^2) is applied as a
    proximal step after each Adam update. Nearest neighbors are re-queried every
    step; ``reach`` ignores pairs farther apart than that. ``trace`` receives
    the penetration count before each step and once at the end.
    """
    if not (lambda_dis >= 0 and math.isfinite(lambda_dis) or lambda_dis == math.inf):
        raise ValueError("lambda_dis must be >= 0")
    if steps < 0 or not lr > 0:
        raise ValueError("steps must be >= 0 and lr > 0")
    if m_o.is_empty or m_h.is_empty:
        return m_h
    normals = vertex_normals(m_h)
    n_o = vertex_normals(m_o)
    visible = visible_vertices(m_o, cameras if cameras is not None else visibility_cameras())
    if len(visible) == 0:
        return m_h
    targets = m_o.vertices[visible]
    target_tree = cKDTree(targets)
    nh = m_h.n_vertices
    d = np.zeros(nh)
    opt = Adam({"d": d}, lr)
    shrink = 1.0 / (1.0 + 2.0 * lr * lambda_dis / nh) if math.isfinite(lambda_dis) else 0.0

    for _ in range(steps):
        v = m_h.vertices + d[:, None] * normals
        o = targets[_nn(target_tree, v)]
        s = np.einsum("ij,ij->i", v - o, normals)
        active = s > 0
        if reach is not None:
            active &= np.linalg.norm(v - o, axis=1) <= reach
        if trace is not None:
            trace.append(int(np.count_nonzero(s > 0 if reach is None else active)))
        g = active.astype(float) / nh

        h_idx = _nn(cKDTree(v), m_o.vertices)
        u = v[h_idx] - m_o.vertices
        s_o = np.einsum("ij,ij->i", u, n_o)
        act_o = s_o > 0
        if reach is not None:
            act_o &= np.linalg.norm(u, axis=1) <= reach
        g += np.bincount(h_idx[act_o], weights=np.einsum("ij,ij->i", n_o[act_o], normals[h_idx[act_o]]),
                         minlength=nh) / nh

        opt.step({"d": g})
        d *= shrink
    if trace is not None:
        trace.append(penetration_count(m_h.replace(vertices=m_h.vertices + d[:, None] * normals), m_o,
                                       normals=normals, reach=reach, cameras=cameras))
    return m_h.replace(vertices=m_h.vertices + d[:, None] * normals)


def transfer(asset_o: TriMesh, target_h: TriMesh, target_rig: Rig, target_pose: Pose, refine: bool = False,
             **refine_kwargs) -> TriMesh:
    """Canonical object + canonical human -> posed composite, optionally refined first."""
    if target_pose.n_bones != target_rig.n_bones:
        raise ValueError(f"pose has {target_pose.n_bones} bones, rig has {target_rig.n_bones}")
    human = refine_composition(target_h, asset_o, **refine_kwargs) if refine else target_h
    return lbs_forward(merge_meshes(human, asset_o), target_rig, target_pose)
