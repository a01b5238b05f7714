"""Deterministic numpy rasterizer with screen-space to vertex backprop.

Pixel (row i, col j) has its center at u = j + 0.5, v = i + 0.5. Camera space
looks down -z with +y up; depth is the distance along the viewing axis.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
from PIL import Image

from layercut.mesh import HUMAN, OBJECT, TriMesh, face_normals

NEAR = 1e-4
_PAIR_CHUNK = 2_000_000


@dataclasses.dataclass(frozen=True)
class Camera:
    radius: float = 3.0
    elevation: float = 0.0
    azimuth: float = 0.0
    fov: float = math.pi / 6
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise ValueError(f"fov must be in (0, pi), got {self.fov}")
        if self.width < 8 or self.height < 8:
            raise ValueError("camera needs at least 8x8 pixels")
        if self.radius <= 0:
            raise ValueError("camera radius must be positive")
        if abs(math.cos(self.elevation)) < 1e-9:
            raise ValueError("elevation of +-pi/2 leaves the up vector undefined")

    @property
    def position(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.radius * np.array(
            [ce * math.sin(self.azimuth), math.sin(self.elevation), ce * math.cos(self.azimuth)]
        )

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera x, y, z axes in world coordinates."""
        z = self.position / self.radius
        x = np.cross([0.0, 1.0, 0.0], z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return np.stack([x, y, z])

    @property
    def focal(self) -> float:
        return (self.height / 2) / math.tan(self.fov / 2)

    def resized(self, width: int, height: int) -> Camera:
        return dataclasses.replace(self, width=width, height=height)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.position) @ self.rotation.T

    def project(self, points: np.ndarray):
        """Pixel coordinates (N, 2) and depth (N,); depth <= 0 means behind the camera."""
        pc = self.to_camera(np.atleast_2d(points))
        depth = -pc[:, 2]
        safe = np.where(np.abs(depth) > 1e-12, depth, 1e-12)
        f = self.focal
        u = self.width / 2 + f * pc[:, 0] / safe
        v = self.height / 2 - f * pc[:, 1] / safe
        return np.stack([u, v], axis=1), depth

    def projection_jacobian(self, points: np.ndarray) -> np.ndarray:
        """d(u, v)/d(world point), shape (N, 2, 3)."""
        pc = self.to_camera(np.atleast_2d(points))
        d = -pc[:, 2]
        f = self.focal
        jc = np.zeros((len(pc), 2, 3))
        jc[:, 0, 0] = f / d
        jc[:, 0, 2] = f * pc[:, 0] / d**2
        jc[:, 1, 1] = -f / d
        jc[:, 1, 2] = -f * pc[:, 1] / d**2
        return jc @ self.rotation

    def view_tag(self) -> str:
        """front within 45 degrees of azimuth 0, back within 45 degrees of pi, side otherwise."""
        a = math.remainder(self.azimuth, 2 * math.pi)
        if abs(a) <= math.pi / 4:
            return "front"
        if abs(a) >= 3 * math.pi / 4:
            return "back"
        return "side"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(**{k: d[k] for k in ("radius", "elevation", "azimuth", "fov", "width", "height") if k in d})


@dataclasses.dataclass(eq=False)
class RenderBuffers:
    mask: np.ndarray  # (H, W) float 0/1
    normal: np.ndarray  # (H, W, 3) camera space
    seg_h: np.ndarray
    seg_o: np.ndarray
    rgb: np.ndarray
    face_id: np.ndarray  # (H, W) int64, -1 where empty
    depth: np.ndarray  # (H, W), inf where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics

    @property
    def shape(self):
        return self.mask.shape

    def channel(self, name: str) -> np.ndarray:
        return getattr(self, name)


def empty_buffers(camera: Camera) -> RenderBuffers:
    h, w = camera.height, camera.width
    return RenderBuffers(
        mask=np.zeros((h, w)), normal=np.zeros((h, w, 3)), seg_h=np.zeros((h, w)), seg_o=np.zeros((h, w)),
        rgb=np.zeros((h, w, 3)), face_id=np.full((h, w), -1, dtype=np.int64),
        depth=np.full((h, w), np.inf), bary=np.zeros((h, w, 3)),
    )


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize(mesh: TriMesh, camera: Camera) -> RenderBuffers:
    """Z-buffered rasterization keeping the nearest front-facing triangle per pixel."""
    out = empty_buffers(camera)
    if mesh.is_empty:
        return out
    h, w = camera.height, camera.width
    v, f = mesh.vertices, mesh.faces
    uv, depth = camera.project(v)
    eye = camera.position
    cross = face_normals(v, f, normalize=False)
    front = np.einsum("ij,ij->i", cross, eye - v[f[:, 0]]) > 0
    ok = front & np.all(depth[f] > NEAR, axis=1)
    tri = uv[f]  # (F, 3, 2)
    area = _edge(tri[:, 0, 0], tri[:, 0, 1], tri[:, 1, 0], tri[:, 1, 1], tri[:, 2, 0], tri[:, 2, 1])
    ok &= np.abs(area) > 1e-12
    lo = np.ceil(tri.min(axis=1) - 0.5).astype(np.int64)
    hi = np.floor(tri.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [w - 1, h - 1])
    span = hi - lo + 1
    ok &= (span[:, 0] > 0) & (span[:, 1] > 0)
    faces = np.flatnonzero(ok)
    if len(faces) == 0:
        return out
    counts = span[faces, 0] * span[faces, 1]

    pix_all, depth_all, face_all, bary_all = [], [], [], []
    start = 0
    cum = np.cumsum(counts)
    while start < len(faces):
        base = cum[start - 1] if start else 0
        stop = max(start + 1, int(np.searchsorted(cum, base + _PAIR_CHUNK, side="right")))
        fs = faces[start:stop]
        cnt = counts[start:stop]
        rep = np.repeat(np.arange(len(fs)), cnt)
        k = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        fid = fs[rep]
        sw = span[fid, 0]
        px = lo[fid, 0] + k % sw
        py = lo[fid, 1] + k // sw
        cx, cy = px + 0.5, py + 0.5
        t = tri[fid]
        a = area[fid]
        l0 = _edge(t[:, 1, 0], t[:, 1, 1], t[:, 2, 0], t[:, 2, 1], cx, cy) / a
        l1 = _edge(t[:, 2, 0], t[:, 2, 1], t[:, 0, 0], t[:, 0, 1], cx, cy) / a
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        lam = np.stack([l0, l1, l2], axis=1)[inside]
        fid = fid[inside]
        inv_d = lam / depth[f[fid]]
        z = 1.0 / inv_d.sum(axis=1)
        pix_all.append(py[inside] * w + px[inside])
        depth_all.append(z)
        face_all.append(fid)
        bary_all.append(inv_d * z[:, None])
        start = stop

    pix = np.concatenate(pix_all)
    if len(pix) == 0:
        return out
    zs = np.concatenate(depth_all)
    fid = np.concatenate(face_all)
    bary = np.concatenate(bary_all)
    order = np.lexsort((fid, zs, pix))
    pix, zs, fid, bary = pix[order], zs[order], fid[order], bary[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, zs, fid, bary = pix[first], zs[first], fid[first], bary[first]

    out.face_id.reshape(-1)[pix] = fid
    out.depth.reshape(-1)[pix] = zs
    out.mask.reshape(-1)[pix] = 1.0
    out.bary.reshape(-1, 3)[pix] = bary
    n_world = cross / np.linalg.norm(cross, axis=1, keepdims=True).clip(1e-300)
    out.normal.reshape(-1, 3)[pix] = n_world[fid] @ camera.rotation.T
    if mesh.colors is not None:
        out.rgb.reshape(-1, 3)[pix] = np.einsum("pk,pkc->pc", bary, mesh.colors[f[fid]])
    if mesh.labels is not None:
        lab = mesh.labels[fid]
        out.seg_h.reshape(-1)[pix] = (lab == HUMAN).astype(float)
        out.seg_o.reshape(-1)[pix] = (lab == OBJECT).astype(float)
    return out


# ----------------------------------------------------------------- backprop


@dataclasses.dataclass(eq=False)
class VertexGrad:
    positions: np.ndarray
    colors: np.ndarray


def _check_buffers(mesh: TriMesh, camera: Camera, buffers: RenderBuffers) -> None:
    if buffers.shape != (camera.height, camera.width):
        raise ValueError(f"buffers are {buffers.shape}, camera is {(camera.height, camera.width)}")
    if buffers.face_id.max() >= mesh.n_faces:
        raise ValueError("buffers reference faces the mesh does not have")


def face_normal_backward(vertices, faces, grad_normals) -> np.ndarray:
    """Chain gradients on unit face normals (F,3) to vertex positions (V,3)."""
    p = vertices[faces]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    c = np.cross(e1, e2)
    norm = np.linalg.norm(c, axis=1, keepdims=True).clip(1e-300)
    n = c / norm
    gc = (grad_normals - n * np.einsum("ij,ij->i", n, grad_normals)[:, None]) / norm
    g1 = np.cross(e2, gc)
    g2 = np.cross(gc, e1)
    g0 = -(g1 + g2)
    out = np.zeros((len(vertices), 3))
    for k, g in enumerate((g0, g1, g2)):
        for ax in range(3):
            out[:, ax] += np.bincount(faces[:, k], weights=g[:, ax], minlength=len(vertices))
    return out


def backprop_pixels_to_vertices(mesh: TriMesh, camera: Camera, buffers: RenderBuffers, pixel_grad,
                                channel: str = "normal", silhouette: bool = False) -> VertexGrad:
    """Per-vertex position and color gradients from per-pixel gradients.

    ``pixel_grad`` is either an array for ``channel`` or a dict mapping channel
    names (normal, rgb, mask, seg_h, seg_o) to arrays. Interior gradients flow
    through face normals and barycentric color interpolation. With
    ``silhouette=True`` an edge-crossing surrogate also moves occluding edges.
    """
    _check_buffers(mesh, camera, buffers)
    grads = pixel_grad if isinstance(pixel_grad, dict) else {channel: pixel_grad}
    nv = mesh.n_vertices
    gpos = np.zeros((nv, 3))
    gcol = np.zeros((nv, 3))
    fid = buffers.face_id.reshape(-1)
    cov = fid >= 0
    faces = mesh.faces
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        expect = buffers.channel(name).shape
        if g.shape != expect:
            raise ValueError(f"{name} gradient has shape {g.shape}, expected {expect}")
    if "normal" in grads and cov.any():
        g = grads["normal"].reshape(-1, 3)[cov] @ camera.rotation  # camera -> world
        gf = np.zeros((mesh.n_faces, 3))
        for ax in range(3):
            gf[:, ax] = np.bincount(fid[cov], weights=g[:, ax], minlength=mesh.n_faces)
        touched = np.flatnonzero(np.any(gf != 0, axis=1))
        if len(touched):
            sub = faces[touched]
            gpos += face_normal_backward(mesh.vertices, sub, gf[touched])
    if "rgb" in grads and cov.any():
        g = grads["rgb"].reshape(-1, 3)[cov]
        b = buffers.bary.reshape(-1, 3)[cov]
        vid = faces[fid[cov]]
        for k in range(3):
            for ax in range(3):
                gcol[:, ax] += np.bincount(vid[:, k], weights=b[:, k] * g[:, ax], minlength=nv)
    if silhouette:
        gpos += silhouette_backward(mesh, camera, buffers, grads)
    return VertexGrad(gpos, gcol)


def _point_in_tri(tri, p, eps=1e-9):
    a = _edge(tri[:, 0, 0], tri[:, 0, 1], tri[:, 1, 0], tri[:, 1, 1], tri[:, 2, 0], tri[:, 2, 1])
    l0 = _edge(tri[:, 1, 0], tri[:, 1, 1], tri[:, 2, 0], tri[:, 2, 1], p[:, 0], p[:, 1]) / a
    l1 = _edge(tri[:, 2, 0], tri[:, 2, 1], tri[:, 0, 0], tri[:, 0, 1], p[:, 0], p[:, 1]) / a
    return (l0 >= -eps) & (l1 >= -eps) & (1 - l0 - l1 >= -eps)


def silhouette_backward(mesh: TriMesh, camera: Camera, buffers: RenderBuffers, grads: dict) -> np.ndarray:
    """Vertex gradients from occlusion edges between neighbouring pixels.

    For neighbours S (covered by occluder face A) and E (background or a face
    lying behind A), the exit point of segment S->E through A's screen edge sits
    at fraction alpha. Treating pixels as unit boxes, the pixel that edge falls
    in changes value at rate (c_S - c_E) per unit alpha; alpha's dependence on
    the edge endpoints carries that to the vertices.
    """
    h, w = buffers.shape
    fid = buffers.face_id
    uv, _ = camera.project(mesh.vertices)
    tri_all = uv[mesh.faces]
    idx = np.arange(h * w).reshape(h, w)
    pairs = [
        (idx[:, :-1].reshape(-1), idx[:, 1:].reshape(-1)),
        (idx[:-1, :].reshape(-1), idx[1:, :].reshape(-1)),
    ]
    p_idx = np.concatenate([p for p, _ in pairs])
    q_idx = np.concatenate([q for _, q in pairs])
    fl = fid.reshape(-1)
    keep = fl[p_idx] != fl[q_idx]
    p_idx, q_idx = p_idx[keep], q_idx[keep]
    out = np.zeros((mesh.n_vertices, 3))
    if len(p_idx) == 0:
        return out
    center = np.stack([idx.reshape(-1) % w + 0.5, idx.reshape(-1) // w + 0.5], axis=1)
    fp, fq = fl[p_idx], fl[q_idx]
    cp, cq = center[p_idx], center[q_idx]
    p_in_q = np.ones(len(p_idx), dtype=bool)
    has_q = fq >= 0
    p_in_q[has_q] = _point_in_tri(tri_all[fq[has_q]], cp[has_q])
    q_in_p = np.ones(len(p_idx), dtype=bool)
    has_p = fp >= 0
    q_in_p[has_p] = _point_in_tri(tri_all[fp[has_p]], cq[has_p])
    p_occ = has_p & p_in_q & ~q_in_p
    q_occ = has_q & q_in_p & ~p_in_q
    sel = p_occ | q_occ
    s_idx = np.where(p_occ, p_idx, q_idx)[sel]
    e_idx = np.where(p_occ, q_idx, p_idx)[sel]
    occ = np.where(p_occ, fp, fq)[sel]
    if len(occ) == 0:
        return out
    S, E = center[s_idx], center[e_idx]
    d = E - S
    tri = tri_all[occ]

    def cross2(a, b):
        return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]

    best_alpha = np.full(len(occ), np.inf)
    best_k = np.full(len(occ), -1)
    for k in range(3):
        a, b = tri[:, k], tri[:, (k + 1) % 3]
        ba = b - a
        m = cross2(d, ba)
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = cross2(a - S, ba) / m
            beta = cross2(a - S, d) / m
        ok = (np.abs(m) > 1e-12) & (alpha >= -1e-9) & (alpha <= 1 + 1e-9) & (beta >= -1e-9) & (beta <= 1 + 1e-9)
        better = ok & (alpha < best_alpha)
        best_alpha[better] = alpha[better]
        best_k[better] = k
    found = best_k >= 0
    if not found.any():
        return out
    S, E, d, tri, occ = S[found], E[found], d[found], tri[found], occ[found]
    s_idx, e_idx = s_idx[found], e_idx[found]
    alpha, k = best_alpha[found], best_k[found]
    rows = np.arange(len(occ))
    a, b = tri[rows, k], tri[rows, (k + 1) % 3]
    m = cross2(d, b - a)
    dn_da = np.stack([b[:, 1] - S[:, 1], -(b[:, 0] - S[:, 0])], axis=1)
    dn_db = np.stack([-(a[:, 1] - S[:, 1]), a[:, 0] - S[:, 0]], axis=1)
    dm_da = np.stack([d[:, 1], -d[:, 0]], axis=1)
    dm_db = -dm_da
    # an edge is crossed by both horizontal and vertical pairs; split its weight
    # so the summed rate matches the change in covered area
    e = b - a
    share = np.abs(m) / (np.abs(e[:, 0]) + np.abs(e[:, 1]))
    da = share[:, None] * (dn_da - alpha[:, None] * dm_da) / m[:, None]
    db = share[:, None] * (dn_db - alpha[:, None] * dm_db) / m[:, None]

    affected = np.where(alpha < 0.5, s_idx, e_idx)
    dl_dalpha = np.zeros(len(occ))
    for name, g in grads.items():
        vals = buffers.channel(name)
        c = vals.reshape(h * w, -1)
        gg = np.asarray(g, dtype=float).reshape(h * w, -1)
        dl_dalpha += np.einsum("ic,ic->i", gg[affected], c[s_idx] - c[e_idx])
    live = dl_dalpha != 0
    if not live.any():
        return out
    va = mesh.faces[occ, k][live]
    vb = mesh.faces[occ, (k + 1) % 3][live]
    gs_a = dl_dalpha[live, None] * da[live]
    gs_b = dl_dalpha[live, None] * db[live]
    ja = camera.projection_jacobian(mesh.vertices[va])
    jb = camera.projection_jacobian(mesh.vertices[vb])
    g3a = np.einsum("pi,pij->pj", gs_a, ja)
    g3b = np.einsum("pi,pij->pj", gs_b, jb)
    for ax in range(3):
        out[:, ax] += np.bincount(va, weights=g3a[:, ax], minlength=mesh.n_vertices)
        out[:, ax] += np.bincount(vb, weights=g3b[:, ax], minlength=mesh.n_vertices)
    return out


# ------------------------------------------------------------ camera sampling


@dataclasses.dataclass(frozen=True)
class CameraSampling:
    radius: float = 3.0
    elevation_range: tuple = (-math.pi / 18, math.pi / 9)
    fov_range: tuple = (math.pi / 7, math.pi / 4)
    width: int = 64
    height: int = 64


def sample_camera(rng_seed, config: CameraSampling | None = None) -> Camera:
    config = config or CameraSampling()
    rng = np.random.default_rng(rng_seed)
    elev = rng.uniform(*config.elevation_range)
    azim = rng.uniform(0.0, 2 * math.pi)
    fov = rng.uniform(*config.fov_range)
    return Camera(config.radius, float(elev), float(azim), float(fov), config.width, config.height)


def orbit_cameras(n: int, radius: float = 3.0, elevation: float = 0.0, fov: float = math.pi / 3,
                  width: int = 64, height: int = 64) -> list[Camera]:
    """n cameras evenly spaced in azimuth."""
    return [Camera(radius, elevation, 2 * math.pi * i / n, fov, width, height) for i in range(n)]


# ----------------------------------------------------------------- zoom views

FACE_SCALE = 5.0
HAND_SCALE = 10.0


@dataclasses.dataclass(frozen=True)
class Zoom:
    """v' = scale * (v - translation)."""

    scale: float
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) - self.translation)


def zoom_transform(target: dict, rng_seed=None) -> Zoom:
    """target: {"joint": xyz, "mode": "face"|"hand"} or {"bbox": (x_l, x_r)}."""
    if "joint" in target:
        mode = target.get("mode", "face")
        if mode not in ("face", "hand"):
            raise ValueError(f"zoom mode must be face or hand, got {mode!r}")
        scale = FACE_SCALE if mode == "face" else HAND_SCALE
        return Zoom(scale, np.asarray(target["joint"], dtype=float).reshape(3))
    if "bbox" in target:
        x_l, x_r = (np.asarray(x, dtype=float).reshape(3) for x in target["bbox"])
        extent = np.max(x_r - x_l)
        if not extent > 0:
            raise ValueError("zoom bbox has zero extent")
        rng = np.random.default_rng(rng_seed)
        lo = (x_r + 3 * x_l) / 4
        hi = (3 * x_r + x_l) / 4
        t = rng.uniform(np.minimum(lo, hi), np.maximum(lo, hi))
        s = rng.uniform(1 / (0.6 * extent), 1 / (0.3 * extent))
        return Zoom(float(s), t)
    raise ValueError("zoom target needs a 'joint' or 'bbox' entry")


def zoom_view(mesh: TriMesh, target: dict, rng_seed=None) -> TriMesh:
    return mesh.transformed(zoom_transform(target, rng_seed).apply)


# --------------------------------------------------------------------- export


def _to_u8(x):
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def save_buffers(buffers: RenderBuffers, out_dir, prefix: str = "view") -> list[Path]:
    """mask/seg as 8-bit gray, normal mapped [-1,1] -> [0,255], rgb direct, face_id as raw int32 .fid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("mask", "seg_h", "seg_o"):
        p = out_dir / f"{prefix}_{name}.png"
        Image.fromarray(_to_u8(buffers.channel(name)), mode="L").save(p)
        paths.append(p)
    p = out_dir / f"{prefix}_normal.png"
    Image.fromarray(_to_u8((buffers.normal + 1) / 2 * buffers.mask[..., None]), mode="RGB").save(p)
    paths.append(p)
    p = out_dir / f"{prefix}_rgb.png"
    Image.fromarray(_to_u8(buffers.rgb), mode="RGB").save(p)
    paths.append(p)
    p = out_dir / f"{prefix}.fid"
    p.write_bytes(buffers.face_id.astype("<i4").tobytes())
    paths.append(p)
    return paths


def load_mask_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("L"))
    return (img >= 128).astype(float)


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(_to_u8(mask), mode="L").save(path)
