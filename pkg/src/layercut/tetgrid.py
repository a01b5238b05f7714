"""Deformable tetrahedral grid, per-node implicit field and marching tetrahedra.

The field stores a signed distance and a 3D offset per grid node. Surface
vertices are linear zero crossings along grid edges whose endpoint signs
differ, so every vertex is a closed-form function of two sdf values and two
offsets; :func:`mt_backward` pushes vertex gradients back onto the field.
"""

from __future__ import annotations

import dataclasses
import itertools
import struct
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from layercut.errors import AssetError
from layercut import _kernels
from layercut.mesh import TriMesh, face_areas, face_normals, is_closed

ZERO_NUDGE = 1e-8
OFFSET_LIMIT = 0.45
MAGIC = b"LCTG"

# local tet edges, ordered; index into this list is the "local edge id"
TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
_EDGE_ID = {tuple(e): i for i, e in enumerate(TET_EDGES.tolist())}


def _edge(a, b):
    return _EDGE_ID[(min(a, b), max(a, b))]


def _build_case_table():
    """Triangles (as local edge ids) for the 16 sign cases of a positively oriented tet.

    Orientation is fixed on a reference tet so that triangle normals point
    toward the positive-sdf side; affine maps with positive determinant keep it.
    """
    ref = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    table = np.full((16, 2, 3), -1, dtype=np.int64)
    counts = np.zeros(16, dtype=np.int64)
    for code in range(16):
        pos = [i for i in range(4) if code >> i & 1]
        neg = [i for i in range(4) if not code >> i & 1]
        if len(pos) in (0, 4):
            continue
        if len(pos) == 1 or len(neg) == 1:
            lone, others = (pos[0], neg) if len(pos) == 1 else (neg[0], pos)
            tris = [[_edge(lone, o) for o in others]]
        else:
            (n0, n1), (p0, p1) = neg, pos
            ring = [_edge(n0, p0), _edge(n0, p1), _edge(n1, p1), _edge(n1, p0)]
            tris = [[ring[0], ring[1], ring[2]], [ring[0], ring[2], ring[3]]]
        toward_pos = ref[pos].mean(0) - ref[neg].mean(0)
        for k, tri in enumerate(tris):
            p = np.array([ref[TET_EDGES[e]].mean(0) for e in tri])
            n = np.cross(p[1] - p[0], p[2] - p[0])
            if n @ toward_pos < 0:
                tri = [tri[0], tri[2], tri[1]]
            table[code, k] = tri
        counts[code] = len(tris)
    return table, counts


CASE_TABLE, CASE_COUNTS = _build_case_table()


@dataclasses.dataclass(frozen=True, eq=False)
class TetGrid:
    nodes: np.ndarray
    tets: np.ndarray
    resolution: int | None = None

    def __post_init__(self):
        nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=np.float64).reshape(-1, 3))
        tets = np.ascontiguousarray(np.asarray(self.tets, dtype=np.int64).reshape(-1, 4))
        if tets.size and (tets.min() < 0 or tets.max() >= len(nodes)):
            raise ValueError("tet index out of range")
        if np.any(np.abs(nodes) > 1.5):
            raise ValueError("grid nodes must lie inside [-1.5, 1.5]^3")
        vol = signed_volumes(nodes, tets)
        if np.any(vol <= 0):
            raise ValueError("tets must have strictly positive signed volume")
        nodes.flags.writeable = False
        tets.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tets", tets)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def cell_size(self) -> float:
        if self.resolution is None:
            raise ValueError("cell size is defined for regular grids only")
        return 2.0 / self.resolution

    def max_offset(self) -> np.ndarray:
        """Per-node offset bound: 0.45 x shortest incident edge."""
        cached = getattr(self, "_max_offset", None)
        if cached is None:
            e = self.tets[:, TET_EDGES].reshape(-1, 2)
            length = np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1)
            shortest = np.full(self.n_nodes, np.inf)
            np.minimum.at(shortest, e[:, 0], length)
            np.minimum.at(shortest, e[:, 1], length)
            cached = OFFSET_LIMIT * shortest
            object.__setattr__(self, "_max_offset", cached)
        return cached


def signed_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = nodes[tets]
    return np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p[:, 3] - p[:, 0]) / 6.0


@dataclasses.dataclass(eq=False)
class ImplicitField:
    """Per-node signed distance and offset; the optimizers update these in place."""

    sdf: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self.sdf = np.array(self.sdf, dtype=np.float64).reshape(-1)
        self.offset = np.array(self.offset, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def zeros(cls, grid: TetGrid) -> ImplicitField:
        return cls(np.zeros(grid.n_nodes), np.zeros((grid.n_nodes, 3)))

    @classmethod
    def from_function(cls, grid: TetGrid, fn) -> ImplicitField:
        return cls(fn(grid.nodes), np.zeros((grid.n_nodes, 3)))

    def copy(self) -> ImplicitField:
        return ImplicitField(self.sdf.copy(), self.offset.copy())

    def check(self, grid: TetGrid) -> None:
        if len(self.sdf) != grid.n_nodes or len(self.offset) != grid.n_nodes:
            raise ValueError(
                f"field has {len(self.sdf)} sdf / {len(self.offset)} offset entries, grid has {grid.n_nodes} nodes"
            )
        if not (np.all(np.isfinite(self.sdf)) and np.all(np.isfinite(self.offset))):
            raise ValueError("field contains non-finite values")
        limit = grid.max_offset() * (1 + 1e-9)
        if np.any(np.linalg.norm(self.offset, axis=1) > limit):
            raise ValueError("offset exceeds 0.45 x minimum incident edge length")

    def clamp_offsets(self, grid: TetGrid) -> None:
        """Project each offset onto its no-inversion ball."""
        norm = np.linalg.norm(self.offset, axis=1)
        limit = grid.max_offset()
        scale = np.where(norm > limit, limit / np.maximum(norm, 1e-300), 1.0)
        self.offset *= scale[:, None]


def build_regular_grid(resolution: int) -> TetGrid:
    """Cube [-1,1]^3 cut into resolution^3 cells, six tets per cell around the main diagonal."""
    if not isinstance(resolution, (int, np.integer)) or not 1 <= resolution <= 256:
        raise ValueError(f"resolution must be an integer in [1, 256], got {resolution!r}")
    r = int(resolution)
    n = r + 1
    ax = np.linspace(-1.0, 1.0, n)
    nodes = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)

    idx = np.arange(r)
    ci, cj, ck = (a.reshape(-1) for a in np.meshgrid(idx, idx, idx, indexing="ij"))
    base = np.stack([ci, cj, ck], axis=1)
    steps = np.eye(3, dtype=np.int64)
    tets = []
    for perm in itertools.permutations(range(3)):
        corners = [base]
        for axis in perm:
            corners.append(corners[-1] + steps[axis])
        tet = np.stack([(c[:, 0] * n + c[:, 1]) * n + c[:, 2] for c in corners], axis=1)
        tets.append(tet)
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    vol = signed_volumes(nodes, tets)
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return TetGrid(nodes, tets, resolution=r)


def _kuhn_weights(frac):
    """Barycentric weights of points in the Kuhn tet containing them (unit cell)."""
    order = np.argsort(-frac, axis=1, kind="stable")
    f = np.take_along_axis(frac, order, axis=1)
    w = np.stack([1 - f[:, 0], f[:, 0] - f[:, 1], f[:, 1] - f[:, 2], f[:, 2]], axis=1)
    return order, w


def locate_points(grid: TetGrid, points: np.ndarray):
    """Containing-tet node indices (P,4) and barycentric weights (P,4) on the rest grid."""
    if grid.resolution is None:
        raise ValueError("point location needs a regular grid")
    r = grid.resolution
    n = r + 1
    u = (np.clip(np.asarray(points, dtype=float), -1.0, 1.0) + 1.0) * (r / 2.0)
    cell = np.minimum(np.floor(u).astype(np.int64), r - 1)
    frac = u - cell
    order, w = _kuhn_weights(frac)
    corners = [cell]
    steps = np.eye(3, dtype=np.int64)
    for k in range(3):
        corners.append(corners[-1] + steps[order[:, k]])
    idx = np.stack([(c[:, 0] * n + c[:, 1]) * n + c[:, 2] for c in corners], axis=1)
    return idx, w


def interpolate_sdf(grid: TetGrid, sdf: np.ndarray, points: np.ndarray) -> np.ndarray:
    idx, w = locate_points(grid, points)
    return np.einsum("pk,pk->p", sdf[idx], w)


# ------------------------------------------------------- marching tetrahedra


@dataclasses.dataclass(frozen=True, eq=False)
class Surface:
    """Extracted mesh plus the grid edge each vertex was interpolated on."""

    mesh: TriMesh
    edges: np.ndarray  # (V, 2) node indices, edges[:, 0] < edges[:, 1]


def _prepared_sdf(sdf):
    s = np.array(sdf, dtype=np.float64)
    s[s == 0.0] = ZERO_NUDGE
    return s


def extract_surface(grid: TetGrid, field: ImplicitField) -> Surface:
    if len(field.sdf) != grid.n_nodes or len(field.offset) != grid.n_nodes:
        raise ValueError(f"field size does not match grid ({grid.n_nodes} nodes)")
    s = _prepared_sdf(field.sdf)
    pos = s > 0
    occ = pos[grid.tets]
    code = occ @ (1 << np.arange(4))
    valid = (code != 0) & (code != 15)
    tets = grid.tets[valid]
    code = code[valid]
    if len(tets) == 0:
        return Surface(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64)), np.zeros((0, 2), np.int64))

    e = tets[:, TET_EDGES]  # (T,6,2)
    a = np.minimum(e[..., 0], e[..., 1])
    b = np.maximum(e[..., 0], e[..., 1])
    crossing = pos[a] != pos[b]
    key = a * grid.n_nodes + b
    uniq, inverse = np.unique(key[crossing], return_inverse=True)
    vid = np.full(key.shape, -1, dtype=np.int64)
    vid[crossing] = inverse

    edges = np.stack([uniq // grid.n_nodes, uniq % grid.n_nodes], axis=1)
    x = grid.nodes + field.offset
    sa, sb = s[edges[:, 0]], s[edges[:, 1]]
    verts = (x[edges[:, 0]] * sb[:, None] - x[edges[:, 1]] * sa[:, None]) / (sb - sa)[:, None]

    ntri = CASE_COUNTS[code]
    tri_local = CASE_TABLE[code]  # (T,2,3)
    rows = np.arange(len(tets))[:, None]
    first = vid[rows, tri_local[:, 0]]
    second = vid[rows, tri_local[:, 1]][ntri == 2]
    two = np.flatnonzero(ntri == 2)
    # keep per-tet ordering: tri 0 of each tet, then tri 1 right after it
    order_key = np.concatenate([np.arange(len(tets)) * 2, two * 2 + 1])
    faces = np.concatenate([first, second])[np.argsort(order_key, kind="stable")]
    return Surface(TriMesh(verts, faces), edges)


def marching_tetrahedra(grid: TetGrid, field: ImplicitField) -> TriMesh:
    """Zero level set of the field as a triangle mesh, normals toward positive sdf."""
    return extract_surface(grid, field).mesh


def mt_vertex_jacobian(grid: TetGrid, field: ImplicitField, edge):
    """Partial derivatives of the crossing vertex on ``edge`` = (a, b).

    Returns a dict with keys ``s_a``, ``s_b`` (3-vectors) and ``offset_a``,
    ``offset_b`` (3x3 matrices).
    """
    a, b = (int(i) for i in edge)
    s = _prepared_sdf(field.sdf)
    sa, sb = s[a], s[b]
    if (sa > 0) == (sb > 0):
        raise ValueError(f"edge ({a}, {b}) has no sign change")
    xa = grid.nodes[a] + field.offset[a]
    xb = grid.nodes[b] + field.offset[b]
    d = sb - sa
    eye = np.eye(3)
    return {
        "vertex": (xa * sb - xb * sa) / d,
        "s_a": sb * (xa - xb) / d**2,
        "s_b": sa * (xb - xa) / d**2,
        "offset_a": (sb / d) * eye,
        "offset_b": (-sa / d) * eye,
    }


def mt_backward(grid: TetGrid, field: ImplicitField, surface: Surface, grad_vertices: np.ndarray):
    """Chain per-vertex gradients (V,3) to (grad_sdf (N,), grad_offset (N,3))."""
    n = grid.n_nodes
    grad_sdf = np.zeros(n)
    grad_off = np.zeros((n, 3))
    if len(surface.edges) == 0:
        return grad_sdf, grad_off
    s = _prepared_sdf(field.sdf)
    ea, eb = surface.edges[:, 0], surface.edges[:, 1]
    sa, sb = s[ea], s[eb]
    x = grid.nodes + field.offset
    diff = x[ea] - x[eb]
    d = sb - sa
    g = np.asarray(grad_vertices, dtype=float)
    gd = np.einsum("ij,ij->i", g, diff) / d**2
    grad_sdf += np.bincount(ea, weights=gd * sb, minlength=n)
    grad_sdf += np.bincount(eb, weights=-gd * sa, minlength=n)
    ca = (sb / d)[:, None] * g
    cb = (-sa / d)[:, None] * g
    for k in range(3):
        grad_off[:, k] += np.bincount(ea, weights=ca[:, k], minlength=n)
        grad_off[:, k] += np.bincount(eb, weights=cb[:, k], minlength=n)
    return grad_sdf, grad_off


# ------------------------------------------------------- distance queries


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a,b,c) to points p; all arrays (K,3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + ab * v[:, None] + ac * w[:, None]

        # edge regions, then vertex regions; later assignments take priority
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = np.where(m, d1 / np.where(d1 - d3 != 0, d1 - d3, 1), 0)
        out = np.where(m[:, None], a + ab * t[:, None], out)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = np.where(m, d2 / np.where(d2 - d6 != 0, d2 - d6, 1), 0)
        out = np.where(m[:, None], a + ac * t[:, None], out)
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t = np.where(m, (d4 - d3) / np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) + (d5 - d6), 1), 0)
        out = np.where(m[:, None], b + (c - b) * t[:, None], out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    return out


class MeshDistance:
    """Exact point-to-surface distance with a centroid KD-tree for candidate pruning.

    Signs come from angle-weighted pseudonormals of the closest feature when the
    mesh is closed, and from the generalized winding number otherwise.
    """

    def __init__(self, mesh: TriMesh):
        if mesh.is_empty:
            raise ValueError("distance query on an empty mesh")
        self.mesh = mesh
        self.tri = np.ascontiguousarray(mesh.vertices[mesh.faces])
        self.centroids = self.tri.mean(axis=1)
        self.radius = np.linalg.norm(self.tri - self.centroids[:, None], axis=2).max(axis=1)
        self.tree = cKDTree(self.centroids)
        self.closed = is_closed(mesh)
        self._pseudo = None

    def query(self, points: np.ndarray):
        """Unsigned distance, closest point and closest face for each point."""
        points = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
        n = len(points)
        k = min(16, len(self.centroids))
        dc, ic = self.tree.query(points, k=k)
        dc = dc.reshape(n, k)
        ic = np.ascontiguousarray(ic.reshape(n, k), dtype=np.int64)
        offsets = np.arange(0, n * k + 1, k, dtype=np.int64)
        best, best_pt, best_face = _kernels.closest_over_candidates(points, self.tri, offsets, ic.reshape(-1))
        # a farther centroid can still hide a closer triangle while d_k - r < best
        todo = np.flatnonzero(dc[:, -1] - self.radius.max() < best)
        if len(todo) and k < len(self.centroids):
            sub_best, sub_pt, sub_face = best[todo], best_pt[todo], best_face[todo]
            _kernels.closest_with_pruning(np.ascontiguousarray(points[todo]), self.tri, self.centroids,
                                          self.radius, sub_best, sub_pt, sub_face)
            best[todo], best_pt[todo], best_face[todo] = sub_best, sub_pt, sub_face
        return best, best_pt, best_face

    def unsigned(self, points):
        return self.query(points)[0]

    def _pseudonormals(self):
        if self._pseudo is None:
            v, f = self.mesh.vertices, self.mesh.faces
            fn = face_normals(v, f)
            vn = np.zeros_like(v)
            for i in range(3):
                e1 = v[f[:, (i + 1) % 3]] - v[f[:, i]]
                e2 = v[f[:, (i + 2) % 3]] - v[f[:, i]]
                den = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
                cos = np.einsum("ij,ij->i", e1, e2) / np.where(den > 0, den, 1.0)
                ang = np.where(den > 0, np.arccos(np.clip(cos, -1.0, 1.0)), 0.0)
                np.add.at(vn, f[:, i], fn * ang[:, None])
            edges = np.sort(f[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
            uniq, inv = np.unique(edges, axis=0, return_inverse=True)
            en = np.zeros((len(uniq), 3))
            np.add.at(en, inv.reshape(-1), np.repeat(fn, 3, axis=0))
            self._pseudo = (fn, vn, en, inv.reshape(-1, 3))
        return self._pseudo

    def signed(self, points, tol: float = 1e-9):
        """Signed distance, negative inside."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        d, cp, face = self.query(points)
        if not self.closed:
            inside = winding_number(self.mesh, points) > 0.5
            return np.where(inside, -d, d)
        fn, vn, en, face_edges = self._pseudonormals()
        tri = self.tri[face]
        # barycentrics of the closest point pick face / edge / vertex
        v0, v1 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        v2 = cp - tri[:, 0]
        d00 = np.einsum("ij,ij->i", v0, v0)
        d01 = np.einsum("ij,ij->i", v0, v1)
        d11 = np.einsum("ij,ij->i", v1, v1)
        d20 = np.einsum("ij,ij->i", v2, v0)
        d21 = np.einsum("ij,ij->i", v2, v1)
        den = d00 * d11 - d01 * d01
        den = np.where(den > 0, den, 1.0)  # sliver faces fall through to the face normal
        b1 = (d11 * d20 - d01 * d21) / den
        b2 = (d00 * d21 - d01 * d20) / den
        bary = np.stack([1 - b1 - b2, b1, b2], axis=1)
        small = bary < tol
        nz = small.sum(axis=1)
        normal = fn[face].copy()
        # one zero barycentric: on the edge opposite that corner
        one = nz == 1
        if one.any():
            corner = np.argmax(small[one], axis=1)
            local_edge = (corner + 1) % 3  # edge (i+1, i+2) is local edge index i+1 in [[0,1],[1,2],[2,0]]
            normal[one] = en[face_edges[face[one], local_edge]]
        two = nz >= 2
        if two.any():
            corner = np.argmax(~small[two], axis=1)
            normal[two] = vn[self.mesh.faces[face[two], corner]]
        s = np.einsum("ij,ij->i", points - cp, normal)
        return np.where(s < 0, -d, d)


def winding_number(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Generalized winding number (solid angle sum / 4 pi)."""
    points = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
    return _kernels.winding_numbers(points, np.ascontiguousarray(mesh.vertices[mesh.faces]))


def signed_distance(mesh: TriMesh, points: np.ndarray, dist: MeshDistance | None = None) -> np.ndarray:
    """Signed distance to a mesh surface, negative inside."""
    dist = dist or MeshDistance(mesh)
    return dist.signed(points)


def mesh_signed_distance(mesh: TriMesh, point) -> float:
    return float(signed_distance(mesh, np.asarray(point, dtype=float).reshape(1, 3))[0])


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-weighted surface samples; returns points and the face each came from."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    area = face_areas(mesh.vertices, mesh.faces)
    face = rng.choice(mesh.n_faces, size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face]]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return pts, face


def sample_sdf_training_points(mesh: TriMesh, n_near: int, n_uniform: int, band: float, seed: int):
    """Near-surface (normal-jittered) and uniform-in-cube points with their mesh SDF."""
    if n_near + n_uniform <= 0:
        raise ValueError("need at least one sample")
    if mesh.is_empty:
        raise ValueError("cannot sample around an empty mesh")
    rng = np.random.default_rng(seed)
    parts = []
    if n_near:
        pts, face = sample_surface(mesh, n_near, rng)
        normals = face_normals(mesh.vertices, mesh.faces)[face]
        parts.append(pts + normals * rng.uniform(-band, band, size=(n_near, 1)))
    if n_uniform:
        parts.append(rng.uniform(-1.0, 1.0, size=(n_uniform, 3)))
    points = np.concatenate(parts)
    return points, signed_distance(mesh, points)


# ------------------------------------------------------- checkpoint format


def save_field(path, grid: TetGrid, field: ImplicitField) -> None:
    if grid.resolution is None:
        raise ValueError("checkpoint format stores regular grids only")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", grid.resolution))
        fh.write(field.sdf.astype("<f4").tobytes())
        fh.write(field.offset.astype("<f4").tobytes())


def load_field(path) -> tuple[TetGrid, ImplicitField]:
    path = Path(path)
    if not path.exists():
        raise AssetError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise AssetError(f"{path} is not a field checkpoint (bad magic)")
    (res,) = struct.unpack("<I", data[4:8])
    grid = build_regular_grid(res)
    n = grid.n_nodes
    expected = 8 + 4 * n * 4
    if len(data) != expected:
        raise AssetError(f"{path}: expected {expected} bytes, found {len(data)}")
    sdf = np.frombuffer(data, dtype="<f4", count=n, offset=8).astype(np.float64)
    off = np.frombuffer(data, dtype="<f4", count=3 * n, offset=8 + 4 * n).astype(np.float64).reshape(n, 3)
    return grid, ImplicitField(sdf, off)
