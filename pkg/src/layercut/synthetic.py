"""Synthetic rig and scenes with known ground truth, for tests and the demo pipeline."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from layercut.mesh import HUMAN, OBJECT, TriMesh, icosphere, merge_meshes
from layercut.raster import Camera, orbit_cameras, rasterize
from layercut.rig import N_EXPR, N_SHAPE, Bone, Pose, Rig, skin_points
from layercut.seglift import ViewMask
from layercut.tetgrid import ImplicitField, build_regular_grid, marching_tetrahedra

BONE_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_upperarm", "l_forearm", "r_upperarm", "r_forearm",
    "l_thigh", "l_shin", "r_thigh", "r_shin",
)
PARENTS = (-1, 0, 1, 2, 1, 4, 1, 6, 0, 8, 0, 10)

_ARM = np.array([math.cos(math.pi / 4), -math.sin(math.pi / 4), 0.0])
JOINTS = np.array([
    [0.0, 0.0, 0.0],
    [0.0, 0.15, 0.0],
    [0.0, 0.42, 0.0],
    [0.0, 0.6, 0.0],
    [0.25, 0.35, 0.0],
    [0.25, 0.35, 0.0] + 0.26 * _ARM,
    [-0.25, 0.35, 0.0],
    [-0.25, 0.35, 0.0] + 0.26 * _ARM * [-1, 1, 1],
    [0.12, -0.1, 0.0],
    [0.12, -0.45, 0.0],
    [-0.12, -0.1, 0.0],
    [-0.12, -0.45, 0.0],
])
L_WRIST = JOINTS[5] + 0.24 * _ARM
R_WRIST = JOINTS[7] + 0.24 * _ARM * [-1, 1, 1]
ANKLE_Y = -0.8

TORSO_CENTER = np.array([0.0, 0.15, 0.0])
TORSO_RADIUS = 0.3
HEAD_RADIUS = 0.15
ARM_RADIUS = 0.07
LEG_RADIUS = 0.08
BLEND = 0.05

BAND_CENTER_Y = 0.15
BAND_RADIUS = 0.335
BAND_HALF_THICKNESS = 0.065
BAND_HALF_HEIGHT = 0.1
CLOTH = 0.02  # ground-truth human is the template grown by this much


def _capsule(p, a, b, r):
    pa = p - a
    ba = np.asarray(b, dtype=float) - a
    h = np.clip(pa @ ba / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[:, None] * ba, axis=1) - r


def _smooth_min(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def body_sdf(points) -> np.ndarray:
    """Capsule body in canonical A-pose."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.linalg.norm(p - TORSO_CENTER, axis=1) - TORSO_RADIUS
    parts = [
        np.linalg.norm(p - JOINTS[3], axis=1) - HEAD_RADIUS,
        _capsule(p, JOINTS[2], JOINTS[3], 0.06),
        _capsule(p, JOINTS[4], JOINTS[5], ARM_RADIUS),
        _capsule(p, JOINTS[5], L_WRIST, ARM_RADIUS),
        _capsule(p, JOINTS[6], JOINTS[7], ARM_RADIUS),
        _capsule(p, JOINTS[7], R_WRIST, ARM_RADIUS),
        _capsule(p, JOINTS[8], [0.12, ANKLE_Y, 0.0], LEG_RADIUS),
        _capsule(p, JOINTS[10], [-0.12, ANKLE_Y, 0.0], LEG_RADIUS),
    ]
    for q in parts:
        d = _smooth_min(d, q, BLEND)
    return d


def human_sdf(points) -> np.ndarray:
    return body_sdf(points) - CLOTH


def band_sdf(points) -> np.ndarray:
    """Thick open-ended cylindrical shell around the torso equator."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    rho = np.hypot(p[:, 0], p[:, 2])
    q = np.stack([np.abs(rho - BAND_RADIUS) - BAND_HALF_THICKNESS, np.abs(p[:, 1] - BAND_CENTER_Y) - BAND_HALF_HEIGHT], 1)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    return outside + np.minimum(q.max(axis=1), 0.0)


def human_color(points) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    return 0.5 + 0.3 * np.sin(2.0 * p + [0.3, 1.1, 2.0])


def object_color(points) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    base = np.array([0.75, 0.3, 0.2])
    return np.clip(base + 0.15 * np.sin(2.0 * p[:, [1, 0, 2]]), 0.0, 1.0)


def _bone_segments():
    tips = {3: JOINTS[3] + [0, 0.12, 0], 5: L_WRIST, 7: R_WRIST, 9: [0.12, ANKLE_Y, 0], 11: [-0.12, ANKLE_Y, 0]}
    segs = []
    for i in range(12):
        if i == 0:
            segs.append((np.array([-0.12, -0.1, 0.0]), np.array([0.12, -0.1, 0.0])))
            continue
        children = [c for c, p in enumerate(PARENTS) if p == i]
        end = tips.get(i, JOINTS[children[0]] if children else JOINTS[i])
        if i == 1:
            end = JOINTS[2]
        segs.append((JOINTS[i].copy(), np.asarray(end, dtype=float)))
    return segs


def skinning_weights(points, tau: float = 0.03) -> np.ndarray:
    """Softmax over the two nearest bone segments."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.stack([_capsule(p, a, b, 0.0) for a, b in _bone_segments()], axis=1)
    order = np.argsort(d, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(p))[:, None]
    near = d[rows, order]
    e = np.exp(-(near - near[:, :1]) / tau)
    w = np.zeros_like(d)
    w[rows, order] = e / e.sum(axis=1, keepdims=True)
    return w


def _bases(vertices: np.ndarray, seed: int):
    rng = np.random.default_rng(seed)
    nv = len(vertices)
    shape = np.zeros((nv, 3, N_SHAPE))
    radial = vertices.copy()
    radial[:, 1] = 0.0
    shape[:, :, 0] = 0.05 * radial
    shape[:, 1, 1] = 0.05 * vertices[:, 1]
    for k in range(2, N_SHAPE):
        freq = rng.normal(size=3) * 2.0
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        shape[:, :, k] = 0.01 * np.sin(vertices @ freq + rng.uniform(0, 2 * np.pi))[:, None] * direction
    expr = np.zeros((nv, 3, N_EXPR))
    head = np.clip((vertices[:, 1] - 0.48) / 0.05, 0.0, 1.0)
    for k in range(N_EXPR):
        freq = rng.normal(size=3) * 4.0
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        expr[:, :, k] = 0.005 * (head * np.sin(vertices @ freq))[:, None] * direction
    return shape, expr


OPENPOSE_MAP = (
    {"bone": 3, "offset": [0.0, 0.0, HEAD_RADIUS]},  # nose
    2,  # neck
    6, 7, {"bone": 7, "offset": (R_WRIST - JOINTS[7]).tolist()},
    4, 5, {"bone": 5, "offset": (L_WRIST - JOINTS[5]).tolist()},
    10, 11, {"bone": 11, "offset": [0.0, ANKLE_Y - JOINTS[11][1], 0.0]},
    8, 9, {"bone": 9, "offset": [0.0, ANKLE_Y - JOINTS[9][1], 0.0]},
    {"bone": 3, "offset": [-0.05, 0.03, 0.13]},
    {"bone": 3, "offset": [0.05, 0.03, 0.13]},
    {"bone": 3, "offset": [-HEAD_RADIUS, 0.0, 0.0]},
    {"bone": 3, "offset": [HEAD_RADIUS, 0.0, 0.0]},
)


def make_rig(resolution: int = 40, seed: int = 0) -> Rig:
    """12-bone capsule-body rig; template = MT of the body SDF."""
    grid = build_regular_grid(resolution)
    template = marching_tetrahedra(grid, ImplicitField.from_function(grid, body_sdf))
    bones = []
    for i, (name, parent) in enumerate(zip(BONE_NAMES, PARENTS)):
        rest = np.eye(4)
        rest[:3, 3] = JOINTS[i] - (JOINTS[parent] if parent >= 0 else 0.0)
        bones.append(Bone(name, parent, rest))
    shape, expr = _bases(template.vertices, seed)
    return Rig(tuple(bones), template, skinning_weights(template.vertices), shape, expr, None, OPENPOSE_MAP)


def _pose(rig: Rig, rotations: dict) -> Pose:
    theta = np.zeros((rig.n_bones, 3))
    for name, rv in rotations.items():
        theta[rig.bone_index(name)] = rv
    return Pose(theta)


def input_pose(rig: Rig) -> Pose:
    return _pose(rig, {
        "spine": [0.0, 0.2, 0.0],
        "head": [0.1, 0.0, 0.0],
        "l_upperarm": [0.0, 0.0, -0.3],
        "l_forearm": [0.0, 0.0, 0.3],
        "r_upperarm": [0.0, 0.0, 0.3],
        "l_shin": [0.25, 0.0, 0.0],
    })


def arms_down_pose(rig: Rig) -> Pose:
    return _pose(rig, {"l_upperarm": [0.0, 0.0, -0.6], "r_upperarm": [0.0, 0.0, 0.6]})


def random_pose(rig: Rig, rng: np.random.Generator, scale: float = 0.4) -> Pose:
    return Pose(rng.normal(scale=scale, size=(rig.n_bones, 3)),
                rng.normal(scale=0.5, size=N_SHAPE), rng.normal(scale=0.5, size=N_EXPR))


def colored_layer(sdf_fn, color_fn, label: int, resolution: int) -> TriMesh:
    grid = build_regular_grid(resolution)
    m = marching_tetrahedra(grid, ImplicitField.from_function(grid, sdf_fn))
    return m.replace(colors=color_fn(m.vertices)).with_label(label)


def union_scan(resolution: int) -> TriMesh:
    """Single-layer canonical scan of human + band, faces labelled by the nearer layer."""
    grid = build_regular_grid(resolution)

    def union(p):
        return np.minimum(human_sdf(p), band_sdf(p))

    m = marching_tetrahedra(grid, ImplicitField.from_function(grid, union))
    centroid = m.vertices[m.faces].mean(axis=1)
    labels = np.where(band_sdf(centroid) < human_sdf(centroid), OBJECT, HUMAN).astype(np.int8)
    on_obj = band_sdf(m.vertices) < human_sdf(m.vertices)
    colors = np.where(on_obj[:, None], object_color(m.vertices), human_color(m.vertices))
    return TriMesh(m.vertices, m.faces, colors, labels)


@dataclasses.dataclass(eq=False)
class Scene:
    rig: Rig
    input_pose: Pose
    pose_set: tuple
    human: TriMesh  # canonical ground truth, colored
    object: TriMesh
    scan: TriMesh  # posed, colored, labelled

    @property
    def composite(self) -> TriMesh:
        return merge_meshes(self.human, self.object)


def make_scene(rig_resolution: int = 40, gt_resolution: int = 48, seed: int = 0) -> Scene:
    rig = make_rig(rig_resolution, seed)
    pose = input_pose(rig)
    canonical_scan = union_scan(gt_resolution)
    scan = canonical_scan.replace(vertices=skin_points(rig, pose, canonical_scan.vertices).posed)
    return Scene(
        rig, pose, (pose, arms_down_pose(rig)),
        colored_layer(human_sdf, human_color, HUMAN, gt_resolution),
        colored_layer(band_sdf, object_color, OBJECT, gt_resolution),
        scan,
    )


class RenderTarget:
    """Mock-guidance target: render fixed canonical layers with the view carried in cond.context.

    ``human`` is rendered for the human space and ``composite`` for the
    composite space, both posed by the context pose and zoomed like the input.
    ``override`` maps a channel name to a replacement target callable.
    """

    def __init__(self, rig: Rig, human: TriMesh, composite: TriMesh, override: dict | None = None):
        self.rig = rig
        self.meshes = {"human": human, "composite": composite}
        self.override = override or {}
        self._posed = {}

    def _mesh(self, space, pose):
        key = (space, id(pose))
        if key not in self._posed:
            base = self.meshes[space]
            posed = base if base.is_empty else base.replace(vertices=skin_points(self.rig, pose, base.vertices).posed)
            self._posed[key] = (pose, posed)  # pose kept alive so its id stays unique
        return self._posed[key][1]

    def __call__(self, x_t, cond):
        ctx = cond.context
        if ctx.get("channel") in self.override:
            return self.override[ctx["channel"]](x_t, cond)
        mesh = self._mesh(ctx["space"], ctx["pose"])
        if ctx.get("zoom") is not None:
            mesh = mesh.transformed(ctx["zoom"].apply)
        return rasterize(mesh, ctx["camera"]).channel(ctx.get("channel", "normal"))


def scene_target(scene: Scene, override: dict | None = None) -> RenderTarget:
    return RenderTarget(scene.rig, scene.human, scene.composite, override)


def template_target(rig: Rig) -> RenderTarget:
    """Both spaces render the bare rig template: a shape prior with no object."""
    return RenderTarget(rig, rig.template, rig.template)


# ------------------------------------------------------------- small scenes


def two_hemisphere_scene(n_views: int = 20, subdivisions: int = 4, size: int = 64):
    """Sphere whose upper-hemisphere faces are the object, plus exact per-view masks."""
    sphere = icosphere(subdivisions, 0.6)
    centroid = sphere.vertices[sphere.faces].mean(axis=1)
    truth = np.where(centroid[:, 1] > 0, OBJECT, HUMAN).astype(np.int8)
    labelled = sphere.with_label(HUMAN).replace(labels=truth)
    views = []
    half = n_views // 2
    cams = orbit_cameras(half, elevation=0.35, fov=math.pi / 4, width=size, height=size)
    cams += orbit_cameras(n_views - half, elevation=-0.35, fov=math.pi / 4, width=size, height=size)
    for i, cam in enumerate(cams):
        cam = Camera(cam.radius, cam.elevation, cam.azimuth + 0.3 * i, cam.fov, size, size)
        views.append(ViewMask(cam, rasterize(labelled, cam).seg_o))
    return sphere, truth, views
