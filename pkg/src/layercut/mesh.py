"""Indexed triangle mesh, I/O (OBJ, binary PLY) and small geometry helpers."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from layercut.errors import AssetError

HUMAN = 0
OBJECT = 1
LABEL_NAMES = {HUMAN: "human", OBJECT: "object"}


@dataclasses.dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh with optional per-vertex colors and per-face layer labels.

    Arrays are copied to contiguous float64 / int64 on construction and
    marked read-only, so a TriMesh can be shared freely.
    """

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face with repeated vertex index")
        c = self.colors
        if c is not None:
            c = np.ascontiguousarray(np.asarray(c, dtype=np.float64).reshape(-1, 3))
            if len(c) != len(v):
                raise ValueError(f"{len(c)} colors for {len(v)} vertices")
        lab = self.labels
        if lab is not None:
            lab = np.ascontiguousarray(np.asarray(lab, dtype=np.int8).reshape(-1))
            if len(lab) != len(f):
                raise ValueError(f"{len(lab)} labels for {len(f)} faces")
            if lab.size and not np.isin(lab, (HUMAN, OBJECT)).all():
                raise ValueError("labels must be HUMAN (0) or OBJECT (1)")
        for arr in (v, f, c, lab):
            if arr is not None:
                arr.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "colors", c)
        object.__setattr__(self, "labels", lab)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def replace(self, **changes) -> TriMesh:
        return dataclasses.replace(self, **changes)

    def with_label(self, label: int) -> TriMesh:
        return self.replace(labels=np.full(self.n_faces, label, dtype=np.int8))

    def transformed(self, fn) -> TriMesh:
        return self.replace(vertices=fn(self.vertices))


def empty_mesh() -> TriMesh:
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def face_normals(vertices: np.ndarray, faces: np.ndarray, normalize: bool = True) -> np.ndarray:
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if normalize:
        length = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(length > 0, length, 1.0)
    return n


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(vertices, faces, normalize=False), axis=1)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals (unit length; zero for isolated vertices)."""
    fn = face_normals(mesh.vertices, mesh.faces, normalize=False)
    vn = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(vn, mesh.faces[:, k], fn)
    length = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(length > 0, length, 1.0)


def merge_meshes(m_h: TriMesh, m_o: TriMesh) -> TriMesh:
    """Concatenate a human and an object layer; faces get HUMAN / OBJECT labels."""
    vertices = np.concatenate([m_h.vertices, m_o.vertices])
    faces = np.concatenate([m_h.faces, m_o.faces + m_h.n_vertices])
    labels = np.concatenate([
        np.full(m_h.n_faces, HUMAN, dtype=np.int8),
        np.full(m_o.n_faces, OBJECT, dtype=np.int8),
    ])
    colors = None
    if m_h.colors is not None or m_o.colors is not None:
        ch = m_h.colors if m_h.colors is not None else np.zeros((m_h.n_vertices, 3))
        co = m_o.colors if m_o.colors is not None else np.zeros((m_o.n_vertices, 3))
        colors = np.concatenate([ch, co])
    return TriMesh(vertices, faces, colors, labels)


def submesh(mesh: TriMesh, face_mask: np.ndarray) -> TriMesh:
    """Faces selected by ``face_mask`` with vertices reindexed compactly."""
    faces = mesh.faces[np.asarray(face_mask, dtype=bool)]
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    colors = mesh.colors[used] if mesh.colors is not None else None
    labels = mesh.labels[np.asarray(face_mask, dtype=bool)] if mesh.labels is not None else None
    return TriMesh(mesh.vertices[used], remap[faces], colors, labels)


def edge_face_counts(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges (E,2) and how many faces use each."""
    e = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges, counts


def is_closed(mesh: TriMesh) -> bool:
    if mesh.is_empty:
        return False
    _, counts = edge_face_counts(mesh.faces)
    return bool(np.all(counts == 2))


def face_adjacency(faces: np.ndarray) -> list[list[int]]:
    """Neighbors of each face across shared edges."""
    n = len(faces)
    e = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(n), 3)
    order = np.lexsort((owner, e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    adj: list[list[int]] = [[] for _ in range(n)]
    start = 0
    same = np.all(e[1:] == e[:-1], axis=1)
    breaks = np.flatnonzero(~same) + 1
    for stop in list(breaks) + [len(e)]:
        group = owner[start:stop]
        for a in group:
            for b in group:
                if a != b:
                    adj[a].append(int(b))
        start = stop
    return adj


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Geodesic sphere with outward-facing (counter-clockwise) triangles."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    f = faces
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(v) * radius + np.asarray(center, dtype=float), np.array(f))


def box_mesh(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5)) -> TriMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    v = lo + corners * (hi - lo)
    # corner index = 4x + 2y + z
    quads = [
        (0, 1, 3, 2),  # x = lo
        (4, 6, 7, 5),  # x = hi
        (0, 4, 5, 1),  # y = lo
        (2, 3, 7, 6),  # y = hi
        (0, 2, 6, 4),  # z = lo
        (1, 5, 7, 3),  # z = hi
    ]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return TriMesh(v, np.array(f))


# --------------------------------------------------------------------- I/O


def save_obj(mesh: TriMesh, path) -> None:
    """OBJ with optional ``v x y z r g b`` vertex colors. Output is byte-stable."""
    lines = []
    if mesh.colors is not None:
        for p, c in zip(mesh.vertices, mesh.colors):
            lines.append("v %.9g %.9g %.9g %.6g %.6g %.6g" % (*p, *c))
    else:
        for p in mesh.vertices:
            lines.append("v %.9g %.9g %.9g" % tuple(p))
    for f in mesh.faces + 1:
        lines.append("f %d %d %d" % tuple(f))
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise AssetError(f"mesh file not found: {path}")
    verts, colors, faces = [], [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            verts.append(vals[:3])
            if len(vals) >= 6:
                colors.append(vals[3:6])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    if colors and len(colors) != len(verts):
        colors = []
    return TriMesh(
        np.array(verts, dtype=float).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(colors) if colors else None,
    )


def save_ply(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY; colors as uchar rgb, labels as a face ``label`` property."""
    has_c = mesh.colors is not None
    has_l = mesh.labels is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {mesh.n_vertices}",
              "property float x", "property float y", "property float z"]
    if has_c:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices"]
    if has_l:
        header += ["property uchar label"]
    header += ["end_header"]
    vfields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_c:
        vfields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vrec = np.zeros(mesh.n_vertices, dtype=vfields)
    vrec["x"], vrec["y"], vrec["z"] = mesh.vertices.T
    if has_c:
        rgb = np.clip(np.round(mesh.colors * 255), 0, 255).astype(np.uint8)
        vrec["red"], vrec["green"], vrec["blue"] = rgb.T
    ffields = [("n", "u1"), ("idx", "<i4", (3,))]
    if has_l:
        ffields += [("label", "u1")]
    frec = np.zeros(mesh.n_faces, dtype=ffields)
    frec["n"] = 3
    frec["idx"] = mesh.faces
    if has_l:
        frec["label"] = mesh.labels
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(vrec.tobytes())
        fh.write(frec.tobytes())


def load_ply(path) -> TriMesh:
    """Reader for the binary layout written by :func:`save_ply`."""
    path = Path(path)
    if not path.exists():
        raise AssetError(f"mesh file not found: {path}")
    data = path.read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    has_c = has_l = False
    for line in header:
        p = line.split()
        if p[:2] == ["element", "vertex"]:
            nv = int(p[2])
        elif p[:2] == ["element", "face"]:
            nf = int(p[2])
        elif p[:2] == ["property", "uchar"] and p[2] == "red":
            has_c = True
        elif p[:2] == ["property", "uchar"] and p[2] == "label":
            has_l = True
    vfields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_c:
        vfields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    ffields = [("n", "u1"), ("idx", "<i4", (3,))]
    if has_l:
        ffields += [("label", "u1")]
    vrec = np.frombuffer(data, dtype=vfields, count=nv, offset=end)
    frec = np.frombuffer(data, dtype=ffields, count=nf, offset=end + vrec.nbytes)
    verts = np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=1).astype(float)
    colors = np.stack([vrec["red"], vrec["green"], vrec["blue"]], axis=1) / 255.0 if has_c else None
    labels = frec["label"].astype(np.int8) if has_l else None
    return TriMesh(verts, frec["idx"].astype(np.int64), colors, labels)


def load_mesh(path) -> TriMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path)
    return load_obj(path)


def save_mesh(mesh: TriMesh, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        save_ply(mesh, path)
    else:
        save_obj(mesh, path)
