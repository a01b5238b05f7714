"""Skeletal body model and linear blend skinning between canonical and posed space."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from layercut.errors import AssetError, ConfigError
from layercut.mesh import TriMesh, load_mesh, save_mesh

N_SHAPE = 10
N_EXPR = 10
N_KEYPOINTS = 18
# OpenPose COCO-18 order; the rig file maps each slot to a bone (or bone + offset)
OPENPOSE_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)


@dataclasses.dataclass(frozen=True)
class Bone:
    name: str
    parent: int
    rest: np.ndarray  # 4x4 rigid transform relative to the parent's frame


def canonical_rotvec(theta: np.ndarray) -> np.ndarray:
    """Wrap axis-angle vectors so each has magnitude <= pi."""
    theta = np.asarray(theta, dtype=float)
    return Rotation.from_rotvec(theta.reshape(-1, 3)).as_rotvec().reshape(theta.shape)


@dataclasses.dataclass(frozen=True, eq=False)
class Pose:
    theta: np.ndarray
    beta: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(N_SHAPE))
    psi: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(N_EXPR))

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1, 3)
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        psi = np.asarray(self.psi, dtype=float).reshape(-1)
        for name, arr in (("theta", theta), ("beta", beta), ("psi", psi)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"pose {name} has non-finite entries")
        object.__setattr__(self, "theta", canonical_rotvec(theta))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "psi", psi)

    @classmethod
    def identity(cls, n_bones: int) -> Pose:
        return cls(np.zeros((n_bones, 3)))

    @property
    def n_bones(self) -> int:
        return len(self.theta)

    def with_root(self, rotvec) -> Pose:
        """Pre-compose a rotation onto the root bone."""
        root = Rotation.from_rotvec(rotvec) * Rotation.from_rotvec(self.theta[0])
        theta = self.theta.copy()
        theta[0] = root.as_rotvec()
        return Pose(theta, self.beta, self.psi)

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "beta": self.beta.tolist(), "psi": self.psi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Pose:
        theta = np.asarray(d["theta"], dtype=float)
        return cls(theta, d.get("beta", np.zeros(N_SHAPE)), d.get("psi", np.zeros(N_EXPR)))


@dataclasses.dataclass(frozen=True, eq=False)
class Rig:
    bones: tuple
    template: TriMesh
    weights: np.ndarray  # (V, n_b)
    shape_basis: np.ndarray  # (V, 3, 10)
    expression_basis: np.ndarray  # (V, 3, 10)
    pose_basis: np.ndarray | None = None  # (V, 3, 9 * (n_b - 1))
    openpose_map: tuple = ()

    def __post_init__(self):
        nb = len(self.bones)
        if nb == 0:
            raise ValueError("rig needs at least one bone")
        if self.bones[0].parent != -1:
            raise ValueError("bone 0 must be the root (parent -1)")
        for i, b in enumerate(self.bones[1:], start=1):
            if not 0 <= b.parent < i:
                raise ValueError(f"bone {i} ({b.name}) has parent {b.parent}; parents must precede children")
        nv = self.template.n_vertices
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (nv, nb):
            raise ValueError(f"weights shape {w.shape}, expected {(nv, nb)}")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1) > 1e-6):
            raise ValueError("skinning weights must be nonnegative and sum to 1")
        sb = np.asarray(self.shape_basis, dtype=float)
        eb = np.asarray(self.expression_basis, dtype=float)
        if sb.shape[:2] != (nv, 3) or eb.shape[:2] != (nv, 3):
            raise ValueError("blend-shape bases must have one 3-vector per template vertex")
        pb = self.pose_basis
        if pb is not None:
            pb = np.asarray(pb, dtype=float)
            if pb.shape != (nv, 3, 9 * (nb - 1)):
                raise ValueError(f"pose basis shape {pb.shape}, expected {(nv, 3, 9 * (nb - 1))}")
        if self.openpose_map and len(self.openpose_map) != N_KEYPOINTS:
            raise ValueError(f"openpose_map needs {N_KEYPOINTS} entries")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "shape_basis", sb)
        object.__setattr__(self, "expression_basis", eb)
        object.__setattr__(self, "pose_basis", pb)
        object.__setattr__(self, "_tree", cKDTree(self.template.vertices))
        rest = np.zeros((nb, 4, 4))
        for i, b in enumerate(self.bones):
            rest[i] = b.rest if b.parent < 0 else rest[b.parent] @ b.rest
        object.__setattr__(self, "rest_world", rest)

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    def bone_index(self, name: str) -> int:
        for i, b in enumerate(self.bones):
            if b.name == name:
                return i
        raise KeyError(name)

    def joints_rest(self) -> np.ndarray:
        return self.rest_world[:, :3, 3].copy()

    def nearest_vertex(self, points: np.ndarray) -> np.ndarray:
        """Nearest template vertex; ties go to the lowest index."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if len(points) == 0:
            return np.zeros(0, dtype=np.int64)
        k = min(4, self.template.n_vertices)
        d, idx = self._tree.query(points, k=k)
        d = d.reshape(len(points), k)
        idx = idx.reshape(len(points), k)
        # among the k nearest, anything within rounding of the minimum counts as tied
        tied = d <= d[:, :1] * (1 + 1e-12) + 1e-15
        return np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)


def _check_pose(rig: Rig, pose: Pose) -> None:
    if pose.n_bones != rig.n_bones:
        raise ValueError(f"pose has {pose.n_bones} bone rotations, rig has {rig.n_bones} bones")
    if len(pose.beta) != rig.shape_basis.shape[2]:
        raise ValueError(f"beta has {len(pose.beta)} entries, shape basis has {rig.shape_basis.shape[2]}")
    if len(pose.psi) != rig.expression_basis.shape[2]:
        raise ValueError(f"psi has {len(pose.psi)} entries, expression basis has {rig.expression_basis.shape[2]}")


def posed_world(rig: Rig, pose: Pose) -> np.ndarray:
    """Posed world frames of each bone: parent world @ rest @ R(theta)."""
    _check_pose(rig, pose)
    rot = Rotation.from_rotvec(pose.theta).as_matrix()
    world = np.zeros((rig.n_bones, 4, 4))
    for i, b in enumerate(rig.bones):
        local = np.asarray(b.rest, dtype=float).copy()
        local[:3, :3] = local[:3, :3] @ rot[i]
        world[i] = local if b.parent < 0 else world[b.parent] @ local
    return world


def bone_transforms(rig: Rig, pose: Pose) -> np.ndarray:
    """(n_b, 4, 4) transforms taking canonical points to posed points per bone."""
    return posed_world(rig, pose) @ np.linalg.inv(rig.rest_world)


def nn_skinning_weights(rig: Rig, query_points: np.ndarray) -> np.ndarray:
    return rig.weights[rig.nearest_vertex(query_points)]


def pose_feature(theta: np.ndarray) -> np.ndarray:
    """Flattened (R - I) over non-root bones."""
    rot = Rotation.from_rotvec(theta[1:]).as_matrix()
    return (rot - np.eye(3)).reshape(-1)


def blend_shape_offset(rig: Rig, pose: Pose) -> np.ndarray:
    """B(beta, theta, psi) per template vertex, shape (V, 3)."""
    _check_pose(rig, pose)
    out = rig.shape_basis @ pose.beta + rig.expression_basis @ pose.psi
    if rig.pose_basis is not None:
        out = out + rig.pose_basis @ pose_feature(pose.theta)
    return out


@dataclasses.dataclass(frozen=True, eq=False)
class Skinning:
    """Posed points plus what backprop needs: per-point blended 3x3 linear parts."""

    posed: np.ndarray
    linear: np.ndarray  # (P, 3, 3); d posed / d canonical
    nearest: np.ndarray

    def backward(self, grad_posed: np.ndarray) -> np.ndarray:
        return np.einsum("pji,pj->pi", self.linear, grad_posed)


def skin_points(rig: Rig, pose: Pose, points: np.ndarray, transforms=None, offsets=None) -> Skinning:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if transforms is None:
        transforms = bone_transforms(rig, pose)
    if offsets is None:
        offsets = blend_shape_offset(rig, pose)
    nn = rig.nearest_vertex(points)
    if len(points) == 0:
        return Skinning(points.copy(), np.zeros((0, 3, 3)), nn)
    w = rig.weights[nn]
    blended = np.einsum("pb,bij->pij", w, transforms)
    x = points + offsets[nn]
    posed = np.einsum("pij,pj->pi", blended[:, :3, :3], x) + blended[:, :3, 3]
    return Skinning(posed, blended[:, :3, :3].copy(), nn)


def lbs_forward(mesh: TriMesh, rig: Rig, pose: Pose) -> TriMesh:
    """Pose a canonical mesh; weights and blend offsets come from the nearest template vertex."""
    if mesh.n_vertices == 0:
        return mesh
    return mesh.replace(vertices=skin_points(rig, pose, mesh.vertices).posed)


def keypoints_3d(rig: Rig, pose: Pose) -> np.ndarray:
    """Posed 3D positions of the 18 OpenPose slots."""
    if not rig.openpose_map:
        raise ValueError("rig has no openpose_map")
    world = posed_world(rig, pose)
    transforms = world @ np.linalg.inv(rig.rest_world)
    out = np.zeros((N_KEYPOINTS, 3))
    for k, entry in enumerate(rig.openpose_map):
        if isinstance(entry, dict):
            b = int(entry["bone"])
            p = rig.rest_world[b, :3, 3] + np.asarray(entry.get("offset", (0, 0, 0)), dtype=float)
            out[k] = transforms[b, :3, :3] @ p + transforms[b, :3, 3]
        else:
            out[k] = world[int(entry), :3, 3]
    return out


def pose_keypoints_2d(rig: Rig, pose: Pose, camera):
    """Pixel coordinates (18, 2) and a visibility flag per keypoint."""
    uv, depth = camera.project(keypoints_3d(rig, pose))
    return uv, depth > 0


# ------------------------------------------------------------------ rig file


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise AssetError(f"rig blob not found: {path}")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise AssetError(f"{path}: expected {int(np.prod(shape))} floats, found {data.size}")
    return data.astype(np.float64).reshape(shape)


def save_rig(rig: Rig, path) -> None:
    """Write a JSON rig document next to its template OBJ and f32 blobs."""
    path = Path(path)
    stem = path.with_suffix("")
    nv, nb = rig.weights.shape
    save_mesh(rig.template, stem.with_name(stem.name + "_template.obj"))
    _write_blob(stem.with_name(stem.name + "_weights.bin"), rig.weights)
    _write_blob(stem.with_name(stem.name + "_shape.bin"), rig.shape_basis)
    _write_blob(stem.with_name(stem.name + "_expr.bin"), rig.expression_basis)
    doc = {
        "bones": [
            {"name": b.name, "parent": b.parent, "rest_transform": np.asarray(b.rest).reshape(-1).tolist()}
            for b in rig.bones
        ],
        "template": {"obj_path": stem.name + "_template.obj"},
        "weights": {"binary_path": stem.name + "_weights.bin", "dims": [nv, nb]},
        "shape_basis": {"binary_path": stem.name + "_shape.bin", "dims": list(rig.shape_basis.shape)},
        "expression_basis": {"binary_path": stem.name + "_expr.bin", "dims": list(rig.expression_basis.shape)},
        "openpose_map": list(rig.openpose_map),
    }
    if rig.pose_basis is not None:
        _write_blob(stem.with_name(stem.name + "_posebasis.bin"), rig.pose_basis)
        doc["pose_basis"] = {"binary_path": stem.name + "_posebasis.bin", "dims": list(rig.pose_basis.shape)}
    path.write_text(json.dumps(doc, indent=1))


def load_rig(path) -> Rig:
    path = Path(path)
    if not path.exists():
        raise AssetError(f"rig file not found: {path}")
    try:
        doc = json.loads(path.read_text())
        base = path.parent
        bones = tuple(
            Bone(b["name"], int(b["parent"]), np.asarray(b["rest_transform"], dtype=float).reshape(4, 4))
            for b in doc["bones"]
        )
        template = load_mesh(base / doc["template"]["obj_path"])
        nv, nb = template.n_vertices, len(bones)
        weights = _read_blob(base / doc["weights"]["binary_path"], (nv, nb))
        sb = _read_blob(base / doc["shape_basis"]["binary_path"], tuple(doc["shape_basis"]["dims"]))
        eb = _read_blob(base / doc["expression_basis"]["binary_path"], tuple(doc["expression_basis"]["dims"]))
        pb = None
        if "pose_basis" in doc:
            pb = _read_blob(base / doc["pose_basis"]["binary_path"], tuple(doc["pose_basis"]["dims"]))
        # f32 storage: renormalize weights so the sum-to-one invariant survives the round trip
        weights = weights / weights.sum(axis=1, keepdims=True)
        return Rig(bones, template, weights, sb, eb, pb, tuple(doc.get("openpose_map", ())))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed rig file {path}: {exc}") from exc


def save_pose(pose: Pose, path) -> None:
    Path(path).write_text(json.dumps(pose.to_dict()))


def load_pose(path) -> Pose:
    path = Path(path)
    if not path.exists():
        raise AssetError(f"pose file not found: {path}")
    try:
        return Pose.from_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed pose file {path}: {exc}") from exc
