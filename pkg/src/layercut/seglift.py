"""Lift multi-view 2D object masks onto scan faces by voting, then split the scan."""

from __future__ import annotations

import dataclasses
import json
from collections import deque
from pathlib import Path

import numpy as np

from layercut._threads import map_ordered
from layercut.errors import AssetError, ConfigError
from layercut.mesh import HUMAN, LABEL_NAMES, OBJECT, TriMesh, face_adjacency, submesh
from layercut.raster import Camera, RenderBuffers, load_mask_png, rasterize

DEFAULT_MIN_VOTES = 3


@dataclasses.dataclass(frozen=True, eq=False)
class ViewMask:
    camera: Camera
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.shape != (self.camera.height, self.camera.width):
            raise ValueError(f"mask is {m.shape}, camera is {(self.camera.height, self.camera.width)}")
        object.__setattr__(self, "mask", (m > 0.5).astype(np.int8))


def count_votes(scan: TriMesh, views) -> tuple[np.ndarray, np.ndarray]:
    """Per-face (object votes, human votes) summed over all views."""
    views = list(views)
    if not views:
        raise ValueError("segmentation lifting needs at least one view")

    def one(view: ViewMask):
        fid = rasterize(scan, view.camera).face_id.reshape(-1)
        hit = fid >= 0
        obj = view.mask.reshape(-1)[hit] == 1
        return (np.bincount(fid[hit][obj], minlength=scan.n_faces),
                np.bincount(fid[hit][~obj], minlength=scan.n_faces))

    obj_votes = np.zeros(scan.n_faces, dtype=np.int64)
    hum_votes = np.zeros(scan.n_faces, dtype=np.int64)
    for o, h in map_ordered(one, views):
        obj_votes += o
        hum_votes += h
    return obj_votes, hum_votes


def propagate_labels(faces: np.ndarray, labels: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Give unknown faces the label of the nearest known face (BFS over shared edges).

    Sources expand in face-index order, so the result is deterministic; faces
    in components with no known face fall back to HUMAN.
    """
    out = np.where(known, labels, HUMAN).astype(np.int8)
    if known.all():
        return out
    adj = face_adjacency(faces)
    seen = known.copy()
    queue = deque(int(i) for i in np.flatnonzero(known))
    while queue:
        cur = queue.popleft()
        for nb in adj[cur]:
            if not seen[nb]:
                seen[nb] = True
                out[nb] = out[cur]
                queue.append(nb)
    return out


def lift_segmentation(scan: TriMesh, views, min_votes: int = DEFAULT_MIN_VOTES) -> np.ndarray:
    """Per-face labels: majority vote where a face has >= min_votes (ties -> human)."""
    obj, hum = count_votes(scan, views)
    total = obj + hum
    known = total >= min_votes
    labels = np.where(obj > hum, OBJECT, HUMAN).astype(np.int8)
    return propagate_labels(scan.faces, labels, known)


def partition_mesh(scan: TriMesh, labels) -> tuple[TriMesh, TriMesh]:
    labels = np.asarray(labels)
    if len(labels) != scan.n_faces:
        raise ValueError(f"{len(labels)} labels for {scan.n_faces} faces")
    scan = scan.replace(labels=labels)
    return submesh(scan, labels == HUMAN), submesh(scan, labels == OBJECT)


def render_scan_ground_truth(scan: TriMesh, labels, camera: Camera) -> RenderBuffers:
    """One pass giving A, N, S_h, S_o and I for the labelled scan."""
    return rasterize(scan.replace(labels=np.asarray(labels, dtype=np.int8)), camera)


# ------------------------------------------------------------------- files


def load_view_manifest(path) -> list[ViewMask]:
    """JSON manifest: {"views": [{"camera": {...}, "mask": "relative/or/absolute.png"}, ...]}."""
    path = Path(path)
    if not path.exists():
        raise AssetError(f"view manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
        entries = doc["views"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed view manifest {path}: {exc}") from exc
    views = []
    for i, entry in enumerate(entries):
        mask_path = path.parent / entry["mask"]
        if not mask_path.exists():
            raise AssetError(f"mask for view {i} not found: {mask_path}")
        try:
            cam = Camera.from_dict(entry["camera"])
            views.append(ViewMask(cam, load_mask_png(mask_path)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"view {i} in {path}: {exc}") from exc
    return views


def save_labels(labels, path) -> None:
    Path(path).write_text("".join(LABEL_NAMES[int(x)] + "\n" for x in labels))


def load_labels(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise AssetError(f"label file not found: {path}")
    lookup = {v: k for k, v in LABEL_NAMES.items()}
    try:
        return np.array([lookup[line.strip()] for line in path.read_text().splitlines() if line.strip()],
                        dtype=np.int8)
    except KeyError as exc:
        raise ConfigError(f"unknown label {exc} in {path}") from exc
