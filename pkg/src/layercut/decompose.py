"""Loss assembly and the geometry / texture optimization loops over two implicit fields."""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from layercut._threads import map_ordered
from layercut.errors import NumericError
from layercut.guidance import (
    Condition,
    GuidanceModel,
    NoiseSchedule,
    build_prompts,
    sds_pixel_gradient,
)
from layercut.mesh import HUMAN, OBJECT, TriMesh, merge_meshes
from layercut.raster import (
    Camera,
    CameraSampling,
    RenderBuffers,
    Zoom,
    backprop_pixels_to_vertices,
    orbit_cameras,
    rasterize,
    sample_camera,
    zoom_transform,
)
from layercut.rig import Pose, Rig, blend_shape_offset, bone_transforms, keypoints_3d, skin_points
from layercut.seglift import render_scan_ground_truth
from layercut.tetgrid import (
    ImplicitField,
    TetGrid,
    extract_surface,
    mt_backward,
    sample_sdf_training_points,
    MeshDistance,
    locate_points,
    signed_distance,
)

__all__ = [
    "Adam", "GeometryProblem", "SDSViews", "LossWeights", "OptimSchedule", "PromptConfig", "init_field", "merge_meshes",
    "optimize_geometry", "optimize_texture", "project_scan_colors", "projection_cameras", "recon_geo_loss", "recon_tex_loss", "seg_comp_loss",
]

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class LossWeights:
    rec_h_geo: float = 5e3
    rec_o_geo: float = 5e3
    seg_comp: float = 1e5
    sds_h_geo: float = 1.0
    sds_o_geo: float = 1.0
    rec_h_tex: float = 1e8
    rec_o_tex: float = 1e8
    sds_h_tex: float = 1.0
    sds_o_tex: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclasses.dataclass(frozen=True)
class OptimSchedule:
    init_steps: int = 400
    geo_steps: int = 1600
    tex_steps: int = 2000
    tex_sds_warmup: int = 400
    geo_lr: float = 1e-3
    tex_lr: float = 1e-2
    init_lr: float = 1e-2
    pose_set: tuple = ()
    seed: int = 0
    render_size: int = 64
    zoom_every: int = 4
    checkpoint_every: int = 0
    silhouette: bool = True

    def __post_init__(self):
        for name in ("init_steps", "geo_steps", "tex_steps", "tex_sds_warmup", "zoom_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("geo_lr", "tex_lr", "init_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.render_size < 8:
            raise ValueError("render_size must be >= 8")


@dataclasses.dataclass(frozen=True)
class PromptConfig:
    gender_word: str = "person"
    object_name: str = "object"


class Adam:
    """Adam over a dict of arrays, updated in place. No weight decay."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            if g is None:
                continue
            c1 = 1 - self.b1**self.t
            c2 = 1 - self.b2**self.t
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _finite_or_raise(what: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite value in {what}")


# ---------------------------------------------------------------- initialization


def init_field(grid: TetGrid, field: ImplicitField, template: TriMesh, steps: int, lr: float = 1e-2,
               seed: int = 0, n_near: int = 8000, n_uniform: int = 8000, band: float = 0.05):
    """Fit per-node sdf to the template's signed distance by Adam on a fixed point pool.

    The pool holds near-surface and uniform samples plus the rest-grid nodes,
    so every node is constrained. Offsets are reset to zero. Returns the new
    field and the per-step mean squared error.
    """
    if template.is_empty:
        raise ValueError("cannot initialize from an empty template")
    out = ImplicitField(field.sdf.copy(), np.zeros_like(field.offset))
    if steps == 0:
        return ImplicitField(field.sdf.copy(), field.offset.copy()), []
    pts, sdf = sample_sdf_training_points(template, n_near, n_uniform, band, seed)
    pts = np.concatenate([pts, grid.nodes])
    sdf = np.concatenate([sdf, signed_distance(template, grid.nodes)])
    idx, w = locate_points(grid, pts)
    flat_idx = idx.reshape(-1)
    n = len(pts)
    opt = Adam({"sdf": out.sdf}, lr)
    losses = []
    for _ in range(steps):
        r = np.einsum("pk,pk->p", out.sdf[idx], w) - sdf
        losses.append(float(np.mean(r**2)))
        g = np.bincount(flat_idx, weights=(2.0 / n * r[:, None] * w).reshape(-1), minlength=grid.n_nodes)
        opt.step({"sdf": g})
    return out, losses


# ------------------------------------------------------------------- losses


def _check_dims(*arrays):
    shape = np.shape(arrays[0])[:2]
    for a in arrays[1:]:
        if np.shape(a)[:2] != shape:
            raise ValueError(f"image size mismatch: {np.shape(a)[:2]} vs {shape}")


def recon_geo_loss(posed: RenderBuffers, scan: RenderBuffers, layer: str):
    """Sum-of-squares reconstruction term and its pixel gradients.

    human: |N_h * S_h - N_scan * S_h|^2
    object: |N_o * S_o - N_scan * S_o|^2 + |A_o - A_scan * S_o|^2
    """
    if layer not in ("h", "o"):
        raise ValueError("layer must be 'h' or 'o'")
    _check_dims(posed.mask, scan.mask)
    s = scan.seg_h if layer == "h" else scan.seg_o
    diff = (posed.normal - scan.normal) * s[..., None]
    value = float(np.sum(diff**2))
    grads = {"normal": 2 * diff * s[..., None]}
    if layer == "o":
        md = posed.mask - scan.mask * s
        value += float(np.sum(md**2))
        grads["mask"] = 2 * md
    return value, grads


def seg_comp_loss(sp_h, sp_o, ss_h, ss_o):
    """|S^p_h - S^scan_h|^2 + |S^p_o - S^scan_o|^2 with gradients for both rendered channels."""
    _check_dims(sp_h, sp_o, ss_h, ss_o)
    dh = np.asarray(sp_h, float) - ss_h
    do = np.asarray(sp_o, float) - ss_o
    return float(np.sum(dh**2) + np.sum(do**2)), 2 * dh, 2 * do


def recon_tex_loss(posed: RenderBuffers, scan: RenderBuffers, layer: str):
    """|I_l * S_l - I_scan * S_l|^2 and its rgb gradient."""
    _check_dims(posed.mask, scan.mask)
    s = (scan.seg_h if layer == "h" else scan.seg_o)[..., None]
    diff = (posed.rgb - scan.rgb) * s
    return float(np.sum(diff**2)), {"rgb": 2 * diff * s}


# ---------------------------------------------------------------- geometry


@dataclasses.dataclass(eq=False)
class Layer:
    """One MT extraction posed by one pose; caches what backprop needs."""

    surface: object
    skin: object  # Skinning or None for identity

    @property
    def canonical(self) -> TriMesh:
        return self.surface.mesh

    def posed_mesh(self) -> TriMesh:
        m = self.surface.mesh
        return m if self.skin is None else m.replace(vertices=self.skin.posed)

    def to_canonical(self, grad_posed):
        return grad_posed if self.skin is None else self.skin.backward(grad_posed)


def _zero_grads(grid: TetGrid):
    return np.zeros(grid.n_nodes), np.zeros((grid.n_nodes, 3))


class SDSViews:
    """Camera close-ups, conditions and the render -> SDS -> vertex-gradient path."""

    def __init__(self, rig: Rig, sched: OptimSchedule, guidance: GuidanceModel | None, prompts: PromptConfig,
                 noise: NoiseSchedule | None = None):
        self.rig = rig
        self.sched = sched
        self.guidance = guidance
        self.prompts = prompts
        self.noise = noise or NoiseSchedule.linear()

    def zoom_for(self, step: int, pose: Pose, object_mesh: TriMesh) -> Zoom | None:
        """Round-robin close-up: face, left hand, right hand, interaction box."""
        if not self.sched.zoom_every or step % self.sched.zoom_every != self.sched.zoom_every - 1:
            return None
        slot = (step // self.sched.zoom_every) % 4
        seed = (self.sched.seed, step, 7)
        if slot < 3:
            if not self.rig.openpose_map:
                return None
            kp = keypoints_3d(self.rig, pose)
            joint, mode = [(kp[0], "face"), (kp[7], "hand"), (kp[4], "hand")][slot]
            return zoom_transform({"joint": joint, "mode": mode}, seed)
        if object_mesh.n_vertices == 0:
            return None
        lo, hi = object_mesh.vertices.min(axis=0), object_mesh.vertices.max(axis=0)
        if not np.max(hi - lo) > 0:
            return None
        return zoom_transform({"bbox": (lo, hi)}, seed)

    def condition(self, space: str, camera: Camera, pose: Pose, zoom: Zoom | None, channel: str) -> Condition:
        tag = camera.view_tag()
        pos, neg = build_prompts(space, self.prompts.gender_word, self.prompts.object_name, tag)
        kp = vis = None
        if self.rig.openpose_map:
            k3 = keypoints_3d(self.rig, pose)
            if zoom is not None:
                k3 = zoom.apply(k3)
            kp, depth = camera.project(k3)
            vis = depth > 0
            kp = np.where(np.isfinite(kp), kp, 0.0)
        ctx = {"camera": camera, "pose": pose, "space": space, "zoom": zoom, "channel": channel}
        return Condition(pos, neg, kp, vis, tag, ctx)

    def sds_image_grad(self, mesh: TriMesh, space: str, camera: Camera, pose: Pose, zoom: Zoom | None,
                       channel: str, seed, weight: float):
        """Render ``mesh`` (already posed and zoomed), run SDS, backprop to its vertices."""
        buf = rasterize(mesh, camera)
        x = buf.channel(channel)
        cond = self.condition(space, camera, pose, zoom, channel)
        rng = np.random.default_rng(seed)
        t = self.noise.sample_t(rng)
        res = sds_pixel_gradient(x, cond, self.guidance, self.noise, t, rng.integers(2**63))
        grads = {channel: res.grad * weight}
        vg = backprop_pixels_to_vertices(mesh, camera, buf, grads,
                                         silhouette=self.sched.silhouette and channel != "rgb")
        return res.residual(self.noise), vg


class GeometryProblem:
    """Everything one geometry step needs, with per-term gradient entry points."""

    def __init__(self, grid: TetGrid, scan: TriMesh, labels, rig: Rig, input_pose: Pose,
                 weights: LossWeights, sched: OptimSchedule, guidance: GuidanceModel | None,
                 prompts: PromptConfig = PromptConfig(), schedule: NoiseSchedule | None = None):
        self.grid = grid
        self.scan = scan.replace(labels=np.asarray(labels, dtype=np.int8))
        self.rig = rig
        self.input_pose = input_pose
        self.weights = weights
        self.sched = sched
        self.guidance = guidance
        self.views = SDSViews(rig, sched, guidance, prompts, schedule)
        self.cam_cfg = CameraSampling(width=sched.render_size, height=sched.render_size)
        self.sds_poses = [Pose.identity(rig.n_bones)] + list(sched.pose_set)
        self._pose_cache = {}

    # -- posing
    def _pose_data(self, pose: Pose):
        key = id(pose)
        if key not in self._pose_cache:
            self._pose_cache[key] = (pose, bone_transforms(self.rig, pose), blend_shape_offset(self.rig, pose))
        return self._pose_cache[key][1:]

    def layer(self, field: ImplicitField, pose: Pose | None) -> Layer:
        surf = extract_surface(self.grid, field)
        if pose is None or surf.mesh.n_vertices == 0:
            return Layer(surf, None)
        T, B = self._pose_data(pose)
        return Layer(surf, skin_points(self.rig, pose, surf.mesh.vertices, T, B))

    def field_grads(self, layer: Layer, field: ImplicitField, grad_canonical):
        if layer.canonical.n_vertices == 0:
            return _zero_grads(self.grid)
        return mt_backward(self.grid, field, layer.surface, grad_canonical)

    # -- reconstruction + segmentation in posed space
    def recon_terms(self, lay_h: Layer, lay_o: Layer, camera: Camera):
        """Returns ({term: value}, grad on posed human verts, grad on posed object verts)."""
        w = self.weights
        hw = camera.width * camera.height
        sil = self.sched.silhouette
        scan_buf = render_scan_ground_truth(self.scan, self.scan.labels, camera)
        ph, po = lay_h.posed_mesh(), lay_o.posed_mesh()
        gh = np.zeros((ph.n_vertices, 3))
        go = np.zeros((po.n_vertices, 3))
        terms = {}

        buf_h = rasterize(ph, camera)
        val, grads = recon_geo_loss(buf_h, scan_buf, "h")
        terms["rec_h"] = val / hw
        if ph.n_vertices and w.rec_h_geo:
            grads = {k: g * (w.rec_h_geo / hw) for k, g in grads.items()}
            gh += backprop_pixels_to_vertices(ph, camera, buf_h, grads, silhouette=sil).positions

        buf_o = rasterize(po, camera)
        val, grads = recon_geo_loss(buf_o, scan_buf, "o")
        terms["rec_o"] = val / hw
        if po.n_vertices and w.rec_o_geo:
            grads = {k: g * (w.rec_o_geo / hw) for k, g in grads.items()}
            go += backprop_pixels_to_vertices(po, camera, buf_o, grads, silhouette=sil).positions

        comp = merge_meshes(ph, po)
        buf_c = rasterize(comp, camera)
        val, g_sh, g_so = seg_comp_loss(buf_c.seg_h, buf_c.seg_o, scan_buf.seg_h, scan_buf.seg_o)
        terms["seg"] = val / hw
        if comp.n_vertices and w.seg_comp and sil:
            k = w.seg_comp / hw
            g = backprop_pixels_to_vertices(comp, camera, buf_c, {"seg_h": g_sh * k, "seg_o": g_so * k},
                                            silhouette=True).positions
            gh += g[: ph.n_vertices]
            go += g[ph.n_vertices:]
        return terms, gh, go

    def sds_geo_grads(self, field_h: ImplicitField, field_o: ImplicitField, space: str, camera: Camera,
                      pose: Pose, zoom: Zoom | None, seed, layers=None):
        """Field gradients of one SDS view.

        ``space="human"`` renders the human layer alone. ``space="composite"``
        renders human and object together; the human contribution is detached,
        so the returned human gradients are exactly zero.
        """
        lay_h, lay_o = layers if layers is not None else (self.layer(field_h, pose), self.layer(field_o, pose))
        w = self.weights.sds_h_geo if space == "human" else self.weights.sds_o_geo
        ph = lay_h.posed_mesh()
        if space == "human":
            mesh = ph
        elif space == "composite":
            mesh = merge_meshes(ph, lay_o.posed_mesh())
        else:
            raise ValueError(f"unknown SDS space {space!r}")
        if zoom is not None:
            mesh = mesh.transformed(zoom.apply)
        gfh, gfo = _zero_grads(self.grid), _zero_grads(self.grid)
        if mesh.is_empty or w == 0:
            return 0.0, gfh, gfo
        residual, vg = self.views.sds_image_grad(mesh, space, camera, pose, zoom, "normal", seed, w)
        gpos = vg.positions * (zoom.scale if zoom is not None else 1.0)
        if space == "human":
            gfh = self.field_grads(lay_h, field_h, lay_h.to_canonical(gpos))
        else:
            # human layer detached: only the object part of the composite receives gradient
            go = gpos[ph.n_vertices:]
            gfo = self.field_grads(lay_o, field_o, lay_o.to_canonical(go))
        return residual, gfh, gfo

    def step_grads(self, field_h: ImplicitField, field_o: ImplicitField, step: int):
        """All loss terms and field gradients for one optimization step."""
        base = (self.sched.seed, step)
        lay_h = self.layer(field_h, self.input_pose)
        lay_o = self.layer(field_o, self.input_pose)
        cam = sample_camera(base + (1,), self.cam_cfg)
        terms, gh, go = self.recon_terms(lay_h, lay_o, cam)
        gfh = self.field_grads(lay_h, field_h, lay_h.to_canonical(gh))
        gfo = self.field_grads(lay_o, field_o, lay_o.to_canonical(go))

        terms["sds_h"] = terms["sds_o"] = 0.0
        if self.guidance is not None and (self.weights.sds_h_geo or self.weights.sds_o_geo):
            pose = self.sds_poses[step % len(self.sds_poses)]
            sds_layers = (self.layer(field_h, pose), self.layer(field_o, pose))
            zoom = self.views.zoom_for(step, pose, sds_layers[1].posed_mesh())
            cam_s = sample_camera(base + (2,), self.cam_cfg)

            def run(space):
                return self.sds_geo_grads(field_h, field_o, space, cam_s, pose, zoom, base + (3, space == "human"),
                                          layers=sds_layers)

            for space, (res, sh, so) in zip(("human", "composite"), map_ordered(run, ("human", "composite"))):
                terms["sds_h" if space == "human" else "sds_o"] = res
                gfh = (gfh[0] + sh[0], gfh[1] + sh[1])
                gfo = (gfo[0] + so[0], gfo[1] + so[1])
        w = self.weights
        terms["total"] = (w.rec_h_geo * terms["rec_h"] + w.rec_o_geo * terms["rec_o"] + w.seg_comp * terms["seg"]
                          + w.sds_h_geo * terms["sds_h"] + w.sds_o_geo * terms["sds_o"])
        return terms, gfh, gfo


@dataclasses.dataclass(eq=False)
class GeometryResult:
    field_h: ImplicitField
    field_o: ImplicitField
    history: list  # one dict of loss terms per step


def optimize_geometry(grid: TetGrid, scan: TriMesh, labels, rig: Rig, input_pose: Pose, weights: LossWeights,
                      sched: OptimSchedule, guidance: GuidanceModel | None, field_h: ImplicitField | None = None,
                      field_o: ImplicitField | None = None, prompts: PromptConfig = PromptConfig(),
                      on_checkpoint: Callable | None = None, progress: Callable | None = None) -> GeometryResult:
    """Initialize both fields from the rig template (unless given), then run geo_steps of Adam.

    A non-finite loss or gradient raises NumericError carrying the last good
    fields as ``exc.last_good``.
    """
    problem = GeometryProblem(grid, scan, labels, rig, input_pose, weights, sched, guidance, prompts)
    history = []
    if field_h is None or field_o is None:
        init, init_losses = init_field(grid, ImplicitField.zeros(grid), rig.template, sched.init_steps,
                                       sched.init_lr, sched.seed)
        history.extend({"phase": "init", "total": v} for v in init_losses)
        field_h = init.copy() if field_h is None else field_h.copy()
        field_o = init.copy() if field_o is None else field_o.copy()
    else:
        field_h, field_o = field_h.copy(), field_o.copy()
    params = {"sdf_h": field_h.sdf, "off_h": field_h.offset, "sdf_o": field_o.sdf, "off_o": field_o.offset}
    opt = Adam(params, sched.geo_lr)
    last_good = (field_h.copy(), field_o.copy())
    for step in range(sched.geo_steps):
        try:
            terms, (gs_h, go_h), (gs_o, go_o) = problem.step_grads(field_h, field_o, step)
            _finite_or_raise(f"geometry step {step}", np.array(list(terms.values())), gs_h, go_h, gs_o, go_o)
        except NumericError as exc:
            exc.last_good = last_good
            exc.step = step
            raise
        opt.step({"sdf_h": gs_h, "off_h": go_h, "sdf_o": gs_o, "off_o": go_o})
        field_h.clamp_offsets(grid)
        field_o.clamp_offsets(grid)
        terms["phase"] = "geo"
        terms["step"] = step
        history.append(terms)
        if progress:
            progress(step, terms)
        if not (np.all(np.isfinite(field_h.sdf)) and np.all(np.isfinite(field_o.sdf))):
            exc = NumericError(f"non-finite field values after step {step}")
            exc.last_good = last_good
            raise exc
        last_good = (field_h.copy(), field_o.copy())
        if on_checkpoint and sched.checkpoint_every and (step + 1) % sched.checkpoint_every == 0:
            on_checkpoint(step + 1, field_h, field_o)
    return GeometryResult(field_h, field_o, history)


# ------------------------------------------------------------------ texture


@dataclasses.dataclass(eq=False)
class TextureResult:
    colors_h: np.ndarray
    colors_o: np.ndarray
    seen_h: np.ndarray  # summed barycentric coverage of pixels the scan assigns to this layer
    seen_o: np.ndarray
    history: list


def projection_cameras(size: int = 256) -> list[Camera]:
    """Four rings of 16 outward views used to decide which vertices the scan shows directly."""
    return [c for el in (-0.3, 0.0, 0.3, 0.6) for c in orbit_cameras(16, elevation=el, width=size, height=size)]


def project_scan_colors(mesh: TriMesh, scan: TriMesh, label: int, cameras=None, tol: float = 0.01):
    """Scan colors for vertices the scan shows directly.

    A vertex counts when, in some camera, it projects onto a pixel where the
    scan shows a ``label`` face at a depth within ``tol`` of the vertex's own.
    It then takes the scan color at its closest point on the scan's ``label``
    faces. Both meshes must be in the same (posed) space. Returns (colors,
    hit mask); rows outside the mask are zero.
    """
    colors = np.zeros((mesh.n_vertices, 3))
    hit = np.zeros(mesh.n_vertices, dtype=bool)
    keep = np.asarray(scan.labels) == label
    if mesh.is_empty or not keep.any() or scan.colors is None:
        return colors, hit
    for cam in cameras if cameras is not None else projection_cameras():
        buf = rasterize(scan, cam)
        seg = buf.seg_h if label == HUMAN else buf.seg_o
        px, depth = cam.project(mesh.vertices)
        ok = np.all(np.isfinite(px), axis=1) & (depth > 0)
        ix = np.floor(np.where(ok[:, None], px, -1)).astype(np.int64)
        ok &= (ix[:, 0] >= 0) & (ix[:, 0] < cam.width) & (ix[:, 1] >= 0) & (ix[:, 1] < cam.height)
        rows = np.flatnonzero(ok)
        y, x = ix[rows, 1], ix[rows, 0]
        good = (seg[y, x] > 0) & (np.abs(buf.depth[y, x] - depth[rows]) <= tol)
        hit[rows[good]] = True
    if hit.any():
        _, colors[hit] = closest_scan_colors(scan, label, mesh.vertices[hit])
    return colors, hit


def closest_scan_colors(scan: TriMesh, label: int, points: np.ndarray):
    """Distance to, and interpolated color at, the closest point on the scan's ``label`` faces."""
    part = TriMesh(scan.vertices, scan.faces[np.asarray(scan.labels) == label])
    dist, point, face = MeshDistance(part).query(points)
    tri = part.vertices[part.faces[face]]
    e0, e1, ep = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], point - tri[:, 0]
    d00, d01, d11 = (np.einsum("ij,ij->i", e0, e0), np.einsum("ij,ij->i", e0, e1), np.einsum("ij,ij->i", e1, e1))
    d20, d21 = np.einsum("ij,ij->i", ep, e0), np.einsum("ij,ij->i", ep, e1)
    den = d00 * d11 - d01 * d01
    den = np.where(den > 0, den, 1.0)
    b1 = (d11 * d20 - d01 * d21) / den
    b2 = (d00 * d21 - d01 * d20) / den
    bary = np.stack([1 - b1 - b2, b1, b2], axis=1)
    colors = np.einsum("ik,ikc->ic", bary, scan.colors[part.faces[face]])
    # a point on a scan vertex takes that vertex's color; overlapping faces make the face pick ambiguous
    used = np.unique(part.faces)
    gap, near = cKDTree(scan.vertices[used]).query(points)
    snap = gap <= 1e-9
    colors[snap] = scan.colors[used[near[snap]]]
    return dist, np.clip(colors, 0.0, 1.0)


def optimize_texture(mesh_h: TriMesh, mesh_o: TriMesh, scan: TriMesh, labels, rig: Rig, input_pose: Pose,
                     weights: LossWeights, sched: OptimSchedule, guidance: GuidanceModel | None,
                     prompts: PromptConfig = PromptConfig(), init_color: float = 0.5, project_tol: float = 0.01,
                     project_cameras=None,
                     progress: Callable | None = None) -> TextureResult:
    """Per-vertex colors for frozen canonical layers.

    Reconstruction compares posed layer RGB with the masked scan RGB. After
    tex_sds_warmup steps, SDS runs on the human alone and on the composite,
    whose human part is detached. Colors stay clamped to [0, 1].
    Vertices the scan shows directly (see project_scan_colors) start from the
    scan color and the rest copy their nearest such vertex; with no such vertex
    (or ``project_tol=0``) every color starts at ``init_color``.
    """
    scan = scan.replace(labels=np.asarray(labels, dtype=np.int8))
    cfg = CameraSampling(width=sched.render_size, height=sched.render_size)
    sds_poses = [Pose.identity(rig.n_bones)] + list(sched.pose_set)
    views = SDSViews(rig, sched, guidance, prompts)

    def posed(mesh, pose):
        if mesh.n_vertices == 0:
            return mesh
        return mesh.replace(vertices=skin_points(rig, pose, mesh.vertices).posed)

    ch = np.full((mesh_h.n_vertices, 3), float(init_color))
    co = np.full((mesh_o.n_vertices, 3), float(init_color))
    seen_h = np.zeros(mesh_h.n_vertices)
    seen_o = np.zeros(mesh_o.n_vertices)
    posed_h, posed_o = posed(mesh_h, input_pose), posed(mesh_o, input_pose)
    if project_tol > 0:
        for colors, mesh, label in ((ch, posed_h, HUMAN), (co, posed_o, OBJECT)):
            pc, hit = project_scan_colors(mesh, scan, label, project_cameras, project_tol)
            if hit.any():
                # unseen vertices lying on the scan surface take its color; the rest copy
                # their nearest seen vertex so boundary faces start consistent
                src = np.flatnonzero(hit)
                colors[:] = pc[src[cKDTree(mesh.vertices[src]).query(mesh.vertices)[1]]]
                miss = np.flatnonzero(~hit)
                if len(miss):
                    dist, near = closest_scan_colors(scan, label, mesh.vertices[miss])
                    on = dist <= project_tol
                    colors[miss[on]] = near[on]
    sds_cache = {}
    opt = Adam({"h": ch, "o": co}, sched.tex_lr)
    history = []

    def coverage(mesh, buf, seen, scan_seg):
        fid = buf.face_id.reshape(-1)
        cov = (fid >= 0) & (scan_seg.reshape(-1) > 0)
        vid = mesh.faces[fid[cov]]
        b = buf.bary.reshape(-1, 3)[cov]
        for k in range(3):
            seen += np.bincount(vid[:, k], weights=b[:, k], minlength=len(seen))

    for step in range(sched.tex_steps):
        base = (sched.seed, step, 11)
        cam = sample_camera(base + (1,), cfg)
        hw = cam.width * cam.height
        scan_buf = render_scan_ground_truth(scan, scan.labels, cam)
        gh = np.zeros_like(ch)
        go = np.zeros_like(co)
        terms = {"step": step, "phase": "tex"}
        for key, mesh, colors, g, seen, lam, lay in (
            ("rec_h", posed_h, ch, gh, seen_h, weights.rec_h_tex, "h"),
            ("rec_o", posed_o, co, go, seen_o, weights.rec_o_tex, "o"),
        ):
            if mesh.n_vertices == 0:
                terms[key] = 0.0
                continue
            m = mesh.replace(colors=colors)
            buf = rasterize(m, cam)
            val, grads = recon_tex_loss(buf, scan_buf, lay)
            terms[key] = val / hw
            coverage(m, buf, seen, scan_buf.seg_h if lay == "h" else scan_buf.seg_o)
            if lam:
                g += backprop_pixels_to_vertices(m, cam, buf, {"rgb": grads["rgb"] * (lam / hw)}).colors
        terms["sds_h"] = terms["sds_o"] = 0.0
        if guidance is not None and step >= sched.tex_sds_warmup:
            pose = sds_poses[step % len(sds_poses)]
            key = id(pose)
            if key not in sds_cache:
                sds_cache[key] = (posed(mesh_h, pose), posed(mesh_o, pose))
            sh, so = sds_cache[key]
            zoom = views.zoom_for(step, pose, so)
            cam_s = sample_camera(base + (2,), cfg)
            for space, lam in (("human", weights.sds_h_tex), ("composite", weights.sds_o_tex)):
                mesh = sh.replace(colors=ch) if space == "human" else merge_meshes(
                    sh.replace(colors=ch), so.replace(colors=co))
                if mesh.is_empty or lam == 0:
                    continue
                if zoom is not None:
                    mesh = mesh.transformed(zoom.apply)
                res, vg = views.sds_image_grad(mesh, space, cam_s, pose, zoom, "rgb", base + (3, space == "human"), lam)
                terms["sds_h" if space == "human" else "sds_o"] = res
                if space == "human":
                    gh += vg.colors
                else:
                    go += vg.colors[mesh_h.n_vertices:]  # human colors detached
        _finite_or_raise(f"texture step {step}", gh, go)
        opt.step({"h": gh, "o": go})
        np.clip(ch, 0.0, 1.0, out=ch)
        np.clip(co, 0.0, 1.0, out=co)
        terms["total"] = (weights.rec_h_tex * terms["rec_h"] + weights.rec_o_tex * terms["rec_o"]
                          + weights.sds_h_tex * terms["sds_h"] + weights.sds_o_tex * terms["sds_o"])
        history.append(terms)
        if progress:
            progress(step, terms)
    return TextureResult(ch, co, seen_h, seen_o, history)
