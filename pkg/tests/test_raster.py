import math

import numpy as np
import pytest

from layercut.mesh import HUMAN, OBJECT, TriMesh, box_mesh, icosphere, merge_meshes
from layercut.raster import (
    FACE_SCALE, HAND_SCALE, Camera, CameraSampling, backprop_pixels_to_vertices, load_mask_png, orbit_cameras,
    rasterize, sample_camera, save_buffers, zoom_transform,
)


def clipped_disk_area(radius_px, w, h, n=4000):
    """Area of a centered disk clipped to the image, by midpoint quadrature along x."""
    xs = (np.arange(n) + 0.5) / n * w - w / 2
    half = np.sqrt(np.clip(radius_px**2 - xs**2, 0, None))
    return float(np.sum(np.minimum(half, h / 2) * 2) * (w / n))


def disk_radius_px(cam, r):
    return cam.focal * math.tan(math.asin(r / cam.radius))


@pytest.mark.parametrize("kw", [dict(fov=0.0), dict(fov=math.pi), dict(width=7), dict(height=4), dict(radius=0)])
def test_camera_invariants(kw):
    with pytest.raises(ValueError):
        Camera(**kw)


def test_sphere_mask_area_matches_clipped_disk():
    cam = Camera(3.0, 0.0, 0.0, math.pi / 6, 64, 64)
    buf = rasterize(icosphere(5), cam)
    expect = clipped_disk_area(disk_radius_px(cam, 1.0), 64, 64)
    assert buf.mask.sum() == pytest.approx(expect, rel=0.05)


def test_small_sphere_area_and_resolution_scaling():
    cam = Camera(3.0, 0.3, 1.0, math.pi / 4, 64, 64)
    m = icosphere(5, 0.5)
    a1 = rasterize(m, cam).mask.sum()
    assert a1 == pytest.approx(math.pi * disk_radius_px(cam, 0.5) ** 2, rel=0.05)
    a2 = rasterize(m, cam.resized(128, 128)).mask.sum()
    assert a2 / a1 == pytest.approx(4.0, rel=0.1)


def test_buffer_invariants():
    m = merge_meshes(icosphere(3, 0.5, (0.3, 0, 0)), box_mesh((-0.9, -0.3, -0.3), (-0.2, 0.3, 0.3)))
    m = m.replace(colors=np.random.default_rng(0).random((m.n_vertices, 3)))
    buf = rasterize(m, Camera(3.0, 0.2, 0.4, math.pi / 4, 48, 40))
    empty = buf.mask == 0
    assert empty.any() and (~empty).any()
    assert np.all(buf.face_id[empty] == -1)
    for name in ("normal", "rgb"):
        assert np.all(buf.channel(name)[empty] == 0)
    assert np.all(buf.seg_h[empty] == 0) and np.all(buf.seg_o[empty] == 0)
    assert np.array_equal(buf.seg_h + buf.seg_o, buf.mask)
    assert np.allclose(np.linalg.norm(buf.normal[~empty], axis=-1), 1.0)
    assert np.allclose(buf.bary[~empty].sum(axis=-1), 1.0)
    lab = m.labels[buf.face_id[~empty]]
    assert np.array_equal(buf.seg_o[~empty], (lab == OBJECT).astype(float))
    assert np.array_equal(buf.seg_h[~empty], (lab == HUMAN).astype(float))


def test_depth_equals_ray_plane_intersection():
    cam = Camera(3.0, 0.1, -0.2, math.pi / 4, 32, 32)
    tri = TriMesh(np.array([[-0.6, -0.5, 0.2], [0.7, -0.4, -0.1], [0.0, 0.6, 0.1]]), np.array([[0, 1, 2]]))
    if not rasterize(tri, cam).mask.any():
        tri = tri.replace(faces=tri.faces[:, ::-1])
    buf = rasterize(tri, cam)
    ys, xs = np.nonzero(buf.mask)
    assert len(ys) > 20
    p0 = tri.vertices[0]
    n = np.cross(tri.vertices[1] - p0, tri.vertices[2] - p0)
    for y, x in zip(ys, xs):
        d_cam = np.array([(x + 0.5 - 16) / cam.focal, -(y + 0.5 - 16) / cam.focal, -1.0])
        d = cam.rotation.T @ d_cam
        t = n @ (p0 - cam.position) / (n @ d)
        assert buf.depth[y, x] == pytest.approx(t, rel=1e-9)


def test_nearest_surface_wins_and_backfaces_cull():
    cam = Camera(3.0, 0.0, 0.0, math.pi / 4, 32, 32)
    near = icosphere(2, 0.3, (0, 0, 0.5))
    far = icosphere(2, 0.6, (0, 0, -0.5))
    buf = rasterize(merge_meshes(far, near), cam)
    assert buf.face_id[16, 16] >= far.n_faces  # the near sphere is in front
    inside_out = icosphere(2, 0.5).replace(faces=icosphere(2, 0.5).faces[:, ::-1])
    center = rasterize(inside_out, cam)
    # only the far (now front-facing) half remains, at greater depth
    assert center.depth[16, 16] == pytest.approx(3.5, rel=0.02)


def test_zero_pixel_gradient_gives_zero():
    m = icosphere(3, 0.5)
    cam = Camera(3.0, 0.2, 0.1, math.pi / 4, 32, 32)
    buf = rasterize(m, cam)
    g = backprop_pixels_to_vertices(m, cam, buf, {"normal": np.zeros((32, 32, 3)), "rgb": np.zeros((32, 32, 3)),
                                                  "mask": np.zeros((32, 32))}, silhouette=True)
    assert not g.positions.any() and not g.colors.any()


def test_interior_normal_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    m = icosphere(3, 0.6)
    m = m.replace(vertices=m.vertices + 0.02 * rng.standard_normal(m.vertices.shape))
    cam = Camera(3.0, 0.3, 0.5, math.pi / 4, 48, 48)
    buf = rasterize(m, cam)
    gp = rng.standard_normal((48, 48, 3))
    ana = backprop_pixels_to_vertices(m, cam, buf, gp, channel="normal").positions
    h = 1e-7
    checked = 0
    for vid in rng.choice(m.n_vertices, 25, replace=False):
        for ax in range(3):
            vp, vm = m.vertices.copy(), m.vertices.copy()
            vp[vid, ax] += h
            vm[vid, ax] -= h
            bp, bm = rasterize(m.replace(vertices=vp), cam), rasterize(m.replace(vertices=vm), cam)
            if not (np.array_equal(bp.face_id, buf.face_id) and np.array_equal(bm.face_id, buf.face_id)):
                continue  # coverage changed: not an interior perturbation
            fd = (np.sum(gp * bp.normal) - np.sum(gp * bm.normal)) / (2 * h)
            assert fd == pytest.approx(ana[vid, ax], rel=1e-4, abs=1e-6)
            checked += 1
    assert checked > 30


def test_color_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    m = icosphere(2, 0.6)
    m = m.replace(colors=rng.random((m.n_vertices, 3)))
    cam = Camera(3.0, 0.0, 0.3, math.pi / 4, 32, 32)
    buf = rasterize(m, cam)
    gp = rng.standard_normal((32, 32, 3))
    ana = backprop_pixels_to_vertices(m, cam, buf, gp, channel="rgb").colors
    h = 1e-4
    for vid in rng.choice(m.n_vertices, 20, replace=False):
        for c in range(3):
            cp, cm = m.colors.copy(), m.colors.copy()
            cp[vid, c] += h
            cm[vid, c] -= h
            fd = (np.sum(gp * rasterize(m.replace(colors=cp), cam).rgb)
                  - np.sum(gp * rasterize(m.replace(colors=cm), cam).rgb)) / (2 * h)
            assert fd == pytest.approx(ana[vid, c], rel=1e-3, abs=1e-9)


def test_silhouette_gradient_tracks_projected_area():
    cam = Camera(3.0, 0.0, 0.0, math.pi / 4, 96, 96)
    s = 0.6
    m = icosphere(5, s)
    buf = rasterize(m, cam)
    g = backprop_pixels_to_vertices(m, cam, buf, {"mask": np.ones((96, 96))}, silhouette=True).positions
    d_area_ds = np.sum(g * m.vertices / s)  # vertices scale as v * s
    d = cam.radius
    analytic = math.pi * cam.focal**2 * 2 * s * d**2 / (d**2 - s**2) ** 2
    assert d_area_ds == pytest.approx(analytic, rel=0.1)
    assert not backprop_pixels_to_vertices(m, cam, buf, {"mask": np.ones((96, 96))}).positions.any()


def test_camera_sampling_ranges_and_determinism():
    cfg = CameraSampling()
    cams = [sample_camera(i, cfg) for i in range(300)]
    assert all(c.radius == 3.0 for c in cams)
    assert all(-math.pi / 18 <= c.elevation <= math.pi / 9 for c in cams)
    assert all(0 <= c.azimuth < 2 * math.pi for c in cams)
    assert all(math.pi / 7 <= c.fov <= math.pi / 4 for c in cams)
    assert sample_camera(5, cfg) == sample_camera(5, cfg)
    assert sample_camera(5, cfg) != sample_camera(6, cfg)


def test_orbit_and_view_tags():
    cams = orbit_cameras(8)
    assert [c.view_tag() for c in cams] == ["front", "front", "side", "back", "back", "back", "side", "front"]
    assert np.allclose([np.linalg.norm(c.position) for c in cams], 3.0)


def test_zoom_targets():
    z = zoom_transform({"joint": [0.1, 0.5, 0.0], "mode": "face"})
    assert z.scale == FACE_SCALE
    assert np.allclose(z.apply(np.array([[0.1, 0.5, 0.0]])), 0)
    assert zoom_transform({"joint": [0, 0, 0], "mode": "hand"}).scale == HAND_SCALE
    lo, hi = np.array([-0.2, 0.0, -0.1]), np.array([0.4, 0.3, 0.1])
    for seed in range(50):
        z = zoom_transform({"bbox": (lo, hi)}, seed)
        assert np.all(z.translation >= (hi + 3 * lo) / 4 - 1e-12)
        assert np.all(z.translation <= (3 * hi + lo) / 4 + 1e-12)
        assert 1 / (0.6 * 0.6) <= z.scale <= 1 / (0.3 * 0.6)
    with pytest.raises(ValueError):
        zoom_transform({"bbox": (lo, lo)})
    with pytest.raises(ValueError):
        zoom_transform({"joint": [0, 0, 0], "mode": "foot"})


def test_export(tmp_path):
    m = icosphere(2, 0.5).with_label(OBJECT)
    cam = Camera(3.0, 0.0, 0.0, math.pi / 4, 24, 16)
    buf = rasterize(m, cam)
    paths = save_buffers(buf, tmp_path, "v0")
    names = sorted(p.name for p in paths)
    assert "v0.fid" in names and "v0_mask.png" in names
    fid = np.frombuffer((tmp_path / "v0.fid").read_bytes(), dtype="<i4").reshape(16, 24)
    assert np.array_equal(fid, buf.face_id)
    assert np.array_equal(load_mask_png(tmp_path / "v0_mask.png"), buf.mask)
    assert np.array_equal(load_mask_png(tmp_path / "v0_seg_o.png"), buf.seg_o)
