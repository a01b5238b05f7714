import math

import numpy as np
import pytest

from layercut.decompose import (
    Adam, GeometryProblem, LossWeights, OptimSchedule, init_field, optimize_geometry, recon_geo_loss,
    recon_tex_loss, seg_comp_loss,
)
from layercut.errors import NumericError
from layercut.guidance import MockGuidance
from layercut.mesh import HUMAN, OBJECT, icosphere
from layercut.raster import Camera, RenderBuffers, backprop_pixels_to_vertices, rasterize
from layercut.seglift import render_scan_ground_truth
from layercut.tetgrid import ImplicitField, build_regular_grid, mt_backward


def buffers(mask, normal=None, seg_h=None, seg_o=None):
    h, w = np.shape(mask)
    b = RenderBuffers(np.zeros((h, w)), np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w, 3)),
                      np.full((h, w), -1), np.full((h, w), np.inf), np.zeros((h, w, 3)))
    b.mask[:] = mask
    if normal is not None:
        b.normal[:] = normal
    if seg_h is not None:
        b.seg_h[:] = seg_h
    if seg_o is not None:
        b.seg_o[:] = seg_o
    return b


def test_recon_loss_zero_when_identical():
    rng = np.random.default_rng(0)
    b = buffers(np.ones((3, 4)), rng.standard_normal((3, 4, 3)), np.ones((3, 4)))
    assert recon_geo_loss(b, b, "h")[0] == 0.0


def test_recon_loss_two_pixel_hand_calculation():
    # pixel 0: scan human, normals differ; pixel 1: scan object, posed object covers both pixels
    scan = buffers([[1, 1]], [[[0, 0, 1], [1, 0, 0]]], seg_h=[[1, 0]], seg_o=[[0, 1]])
    posed_h = buffers([[1, 0]], [[[0, 1, 0], [0, 0, 0]]])
    posed_o = buffers([[1, 1]], [[[0, 0, 1], [0.6, 0.8, 0]]])
    vh, gh = recon_geo_loss(posed_h, scan, "h")
    assert vh == pytest.approx(2.0)  # |(0,1,0)-(0,0,1)|^2
    assert np.allclose(gh["normal"][0, 0], [0, 2, -2]) and not gh["normal"][0, 1].any()
    vo, go = recon_geo_loss(posed_o, scan, "o")
    # normal: |(0.6,0.8,0)-(1,0,0)|^2 = 0.16+0.64 = 0.8 ; mask: pixel 0 has A_o=1 but S_o=0 -> 1
    assert vo == pytest.approx(1.8)
    assert np.allclose(go["mask"], [[2, 0]])


def test_object_mask_larger_than_scan_object_is_penalized():
    scan = buffers(np.ones((4, 4)), seg_o=np.pad(np.ones((2, 2)), 1))
    posed = buffers(np.ones((4, 4)))
    assert recon_geo_loss(posed, scan, "o")[0] == pytest.approx(12.0)


def test_recon_loss_rejects_bad_inputs():
    with pytest.raises(ValueError):
        recon_geo_loss(buffers(np.ones((2, 2))), buffers(np.ones((2, 3))), "h")
    with pytest.raises(ValueError):
        recon_geo_loss(buffers(np.ones((2, 2))), buffers(np.ones((2, 2))), "x")


def test_seg_loss_cases():
    s_h = np.array([[1, 1, 0, 0]], float)
    s_o = np.array([[0, 0, 1, 1]], float)
    assert seg_comp_loss(s_h, s_o, s_h, s_o)[0] == 0.0
    # human pokes through the object on k = 2 pixels: both channels wrong there
    p_h = np.array([[1, 1, 1, 1]], float)
    p_o = np.zeros((1, 4))
    val, gh, go = seg_comp_loss(p_h, p_o, s_h, s_o)
    assert val >= 2 * 2
    assert np.allclose(gh, 2 * (p_h - s_h)) and np.allclose(go, 2 * (p_o - s_o))
    # empty object reduces to |S_h - A_scan|^2 when the scan is all human
    a = np.array([[1, 1, 1, 0]], float)
    assert seg_comp_loss(s_h, np.zeros((1, 4)), a, np.zeros((1, 4)))[0] == pytest.approx(np.sum((s_h - a) ** 2))
    with pytest.raises(ValueError):
        seg_comp_loss(s_h, s_o, s_h, np.zeros((2, 4)))


def test_tex_loss_masks_by_layer():
    scan = buffers(np.ones((1, 2)), seg_h=[[1, 0]], seg_o=[[0, 1]])
    scan.rgb[:] = [[[1, 0, 0], [0, 1, 0]]]
    posed = buffers(np.ones((1, 2)))
    val, g = recon_tex_loss(posed, scan, "h")
    assert val == pytest.approx(1.0) and np.allclose(g["rgb"][0, 1], 0)


def test_adam_first_step_moves_by_lr():
    x = np.array([1.0, -2.0, 0.5])
    opt = Adam({"x": x}, 0.1)
    opt.step({"x": np.array([3.0, -0.01, 0.0])})
    assert np.allclose(x, [0.9, -1.9, 0.5])


def test_schedule_and_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(seg_comp=-1)
    with pytest.raises(ValueError):
        LossWeights(rec_h_geo=math.nan)
    with pytest.raises(ValueError):
        OptimSchedule(geo_steps=-1)
    with pytest.raises(ValueError):
        OptimSchedule(geo_lr=0)
    d = OptimSchedule()
    assert (d.init_steps, d.geo_steps, d.tex_steps, d.tex_sds_warmup, d.geo_lr, d.tex_lr) == (400, 1600, 2000, 400,
                                                                                              1e-3, 1e-2)
    w = LossWeights()
    assert (w.rec_h_geo, w.rec_o_geo, w.seg_comp, w.sds_h_geo, w.sds_o_geo, w.rec_h_tex) == (5e3, 5e3, 1e5, 1, 1, 1e8)


def test_init_field_fits_template():
    grid = build_regular_grid(16)
    template = icosphere(3, 0.5)
    field, losses = init_field(grid, ImplicitField.zeros(grid), template, 300)
    assert losses[-1] < 1e-2 * losses[0]
    inside = np.linalg.norm(grid.nodes, axis=1) < 0.4
    outside = np.linalg.norm(grid.nodes, axis=1) > 0.6
    assert np.all(field.sdf[inside] < 0) and np.all(field.sdf[outside] > 0)
    assert not field.offset.any()
    with pytest.raises(ValueError):
        init_field(grid, field, icosphere(1).replace(faces=np.zeros((0, 3), int)), 5)


def _sphere_problem(rig, pose, scan_radius=0.55, res=4, size=40):
    grid = build_regular_grid(res)
    scan = icosphere(3, scan_radius).with_label(HUMAN)
    sched = OptimSchedule(render_size=size, silhouette=False)
    return grid, GeometryProblem(grid, scan, scan.labels, rig, pose, LossWeights(), sched, None)


def interior_gradient_check(problem, grid, field, cam, nodes, h=1e-4):
    """(analytic, finite-difference) d rec_h / d sdf on pixels whose face ids stay put."""
    scan_buf = render_scan_ground_truth(problem.scan, problem.scan.labels, cam)

    def render(f):
        lay = problem.layer(f, problem.input_pose)
        return lay, rasterize(lay.posed_mesh(), cam)

    lay, base = render(field)
    out = []
    for j in nodes:
        fp, fm = field.copy(), field.copy()
        fp.sdf[j] += h
        fm.sdf[j] -= h
        bp, bm = render(fp)[1], render(fm)[1]
        keep = (base.face_id >= 0) & (bp.face_id == base.face_id) & (bm.face_id == base.face_id)

        def loss(b):
            d = (b.normal - scan_buf.normal) * (scan_buf.seg_h * keep)[..., None]
            return float(np.sum(d**2))

        _, grads = recon_geo_loss(base, scan_buf, "h")
        g_pix = grads["normal"] * keep[..., None]
        gv = backprop_pixels_to_vertices(lay.posed_mesh(), cam, base, g_pix).positions
        gs, _ = mt_backward(grid, field, lay.surface, lay.to_canonical(gv))
        out.append((gs[j], (loss(bp) - loss(bm)) / (2 * h)))
    return np.array(out)


def test_end_to_end_geometry_gradient(rig, scene):
    grid, problem = _sphere_problem(rig, scene.input_pose)
    rng = np.random.default_rng(3)
    field = ImplicitField.from_function(grid, lambda p: np.linalg.norm(p, axis=1) - 0.5)
    field.sdf += 0.05 * rng.standard_normal(grid.n_nodes)
    cam = Camera(3.0, 0.3, 0.7, math.pi / 5, 40, 40)
    surf_nodes = np.unique(grid.tets[np.ptp(np.sign(field.sdf[grid.tets]), axis=1) > 0])
    res = interior_gradient_check(problem, grid, field, cam, surf_nodes)
    big = np.abs(res[:, 1]) > 1e-3 * np.abs(res[:, 1]).max()
    assert big.sum() >= 5
    assert np.allclose(res[big, 0], res[big, 1], rtol=1e-2, atol=1e-6 * np.abs(res[:, 1]).max())


def test_composite_sds_never_touches_the_human_field(rig, scene):
    grid = build_regular_grid(12)
    sched = OptimSchedule(render_size=32)
    target = lambda x_t, cond: np.zeros_like(x_t)  # noqa: E731
    problem = GeometryProblem(grid, scene.scan, scene.scan.labels, rig, scene.input_pose, LossWeights(), sched,
                              MockGuidance(target))
    fh = ImplicitField.from_function(grid, lambda p: np.linalg.norm(p, axis=1) - 0.45)
    fo = ImplicitField.from_function(grid, lambda p: np.linalg.norm(p - [0.1, 0.1, 0.2], axis=1) - 0.35)
    for i in range(4):
        cam = Camera(3.0, 0.1 * i, 0.8 * i, math.pi / 4, 32, 32)
        _, (gsh, goh), (gso, goo) = problem.sds_geo_grads(fh, fo, "composite", cam, scene.input_pose, None, i)
        assert not gsh.any() and not goh.any()
        assert np.abs(gso).max() > 0
        _, (hsh, _), (hso, hoo) = problem.sds_geo_grads(fh, fo, "human", cam, scene.input_pose, None, i)
        assert np.abs(hsh).max() > 0 and not hso.any() and not hoo.any()


def _small_run(scene, guidance=None, steps=6, **kw):
    grid = build_regular_grid(10)
    sched = OptimSchedule(init_steps=20, geo_steps=steps, render_size=24, pose_set=scene.pose_set, **kw)
    return optimize_geometry(grid, scene.scan, scene.scan.labels, scene.rig, scene.input_pose, LossWeights(), sched,
                             guidance)


def test_geometry_is_deterministic(scene):
    g = MockGuidance(lambda x_t, cond: np.zeros_like(x_t))
    a, b = _small_run(scene, g), _small_run(scene, g)
    assert np.array_equal(a.field_h.sdf, b.field_h.sdf) and np.array_equal(a.field_o.offset, b.field_o.offset)
    assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
    c = _small_run(scene, g, seed=1)
    assert not np.array_equal(a.field_h.sdf, c.field_h.sdf)


def test_history_and_checkpoints(scene):
    seen = []
    grid = build_regular_grid(8)
    sched = OptimSchedule(init_steps=5, geo_steps=6, render_size=16, checkpoint_every=2)
    res = optimize_geometry(grid, scene.scan, scene.scan.labels, scene.rig, scene.input_pose, LossWeights(), sched,
                            None, on_checkpoint=lambda step, fh, fo: seen.append(step))
    assert seen == [2, 4, 6]
    assert [h["phase"] for h in res.history] == ["init"] * 5 + ["geo"] * 6
    assert all(h["sds_h"] == 0 for h in res.history if h["phase"] == "geo")


def test_non_finite_guidance_aborts_with_last_good(scene):
    big = MockGuidance(lambda x_t, cond: np.full(x_t.shape, 1e305))
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericError) as info:
        _small_run(scene, big, steps=3)
    fh, fo = info.value.last_good
    assert np.all(np.isfinite(fh.sdf)) and np.all(np.isfinite(fo.sdf))


def test_reconstruction_only_fits_a_representable_scan(rig):
    from layercut.rig import Pose
    from layercut.tetgrid import marching_tetrahedra
    grid = build_regular_grid(12)
    truth = ImplicitField.from_function(grid, lambda p: np.linalg.norm(p * [1.0, 0.8, 1.0], axis=1) - 0.5)
    scan = marching_tetrahedra(grid, truth).with_label(HUMAN)
    start = truth.copy()
    start.sdf += 0.03
    empty = ImplicitField(np.full(grid.n_nodes, 1.0), np.zeros((grid.n_nodes, 3)))
    sched = OptimSchedule(geo_steps=300, render_size=48)
    res = optimize_geometry(grid, scan, scan.labels, rig, Pose.identity(rig.n_bones), LossWeights(), sched, None,
                            field_h=start, field_o=empty)
    tot = np.array([h["total"] for h in res.history])
    assert tot[-20:].mean() < 1e-3 * tot[:5].mean()
