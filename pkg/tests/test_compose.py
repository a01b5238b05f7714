import math

import numpy as np
import pytest

from layercut.compose import (
    penetration_count, penetration_mask, refine_composition, transfer, visibility_cameras, visible_vertices,
)
from layercut.mesh import HUMAN, OBJECT, box_mesh, empty_mesh, icosphere, merge_meshes, vertex_normals
from layercut.raster import Camera
from layercut.rig import Pose, lbs_forward


@pytest.fixture(scope="module")
def spheres():
    return icosphere(4, 1.1), icosphere(3, 1.0)


def test_single_camera_sees_about_half_a_sphere():
    m = icosphere(4, 0.5)
    frac = len(visible_vertices(m, [Camera(3.0, 0.0, 0.0, math.pi / 4, 256, 256)])) / m.n_vertices
    # a pinhole at distance d sees the cap up to the tangent cone: (1 - R/d) / 2
    assert frac == pytest.approx((1 - 0.5 / 3.0) / 2, rel=0.15)


def test_hidden_mesh_has_no_visible_vertices():
    inner = icosphere(2, 0.3)
    cams = visibility_cameras(8, 64)
    assert len(visible_vertices(inner, cams, occluder=icosphere(3, 0.8))) == 0


def test_visibility_union_is_monotone():
    m = icosphere(3, 0.6)
    cams = visibility_cameras(12, 64)
    prev = set()
    for k in range(1, len(cams) + 1):
        cur = set(visible_vertices(m, cams[:k]).tolist())
        assert prev <= cur
        prev = cur
    with pytest.raises(ValueError):
        visible_vertices(m, [])


def test_concentric_spheres_refine_fully(spheres):
    m_h, m_o = spheres
    n0 = vertex_normals(m_h)
    assert penetration_count(m_h, m_o) == m_h.n_vertices
    trace = []
    out = refine_composition(m_h, m_o, trace=trace)
    assert trace[-1] == 0
    assert penetration_count(out, m_o, normals=n0) == 0
    assert np.linalg.norm(out.vertices, axis=1).max() < 1.0


def test_refinement_moves_only_along_frozen_normals(spheres):
    m_h, m_o = spheres
    before = m_o.vertices.copy()
    out = refine_composition(m_h, m_o, steps=50)
    assert np.array_equal(m_o.vertices, before)
    d = out.vertices - m_h.vertices
    n = vertex_normals(m_h)
    assert np.abs(np.cross(d, n)).max() <= 1e-6
    assert np.array_equal(out.faces, m_h.faces)


def test_penetration_count_never_rises(spheres):
    trace = []
    refine_composition(*spheres, trace=trace)
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_inner_human_stays_put():
    m_h, m_o = icosphere(3, 0.5), icosphere(3, 1.0)
    assert penetration_count(m_h, m_o) == 0
    out = refine_composition(m_h, m_o, steps=100)
    assert np.abs(out.vertices - m_h.vertices).max() <= 1e-12


def test_infinite_regularizer_freezes_human(spheres):
    out = refine_composition(*spheres, lambda_dis=math.inf, steps=20)
    assert np.abs(out.vertices - spheres[0].vertices).max() <= 1e-6


def test_refine_argument_checks(spheres):
    assert refine_composition(spheres[0], empty_mesh()) is spheres[0]
    for kw in (dict(lambda_dis=-1.0), dict(steps=-1), dict(lr=0.0)):
        with pytest.raises(ValueError):
            refine_composition(*spheres, **kw)


def test_reach_ignores_far_pairs():
    m_h = icosphere(3, 0.4, (3.0, 0.0, 0.0))  # far to the side of the object
    m_o = icosphere(3, 1.0)
    assert penetration_count(m_h, m_o, reach=0.5) == 0
    assert penetration_mask(m_h, m_o).any()


def test_transfer_identity_pose(scene):
    rig = scene.rig
    ident = Pose.identity(rig.n_bones)
    out = transfer(scene.object, scene.human, rig, ident)
    ref = lbs_forward(merge_meshes(scene.human, scene.object), rig, ident)
    assert np.allclose(out.vertices, ref.vertices, atol=1e-12)
    assert np.allclose(out.vertices, merge_meshes(scene.human, scene.object).vertices, atol=1e-6)
    assert np.array_equal(out.labels[: scene.human.n_faces], np.full(scene.human.n_faces, HUMAN))
    assert np.all(out.labels[scene.human.n_faces:] == OBJECT)


def test_transfer_reposes_both_layers(scene):
    out = transfer(scene.object, scene.human, scene.rig, scene.pose_set[1])
    ref = lbs_forward(scene.composite, scene.rig, scene.pose_set[1])
    assert np.array_equal(out.vertices, ref.vertices)
    with pytest.raises(ValueError):
        transfer(scene.object, scene.human, scene.rig, Pose.identity(scene.rig.n_bones + 1))


def test_transfer_with_refine_clears_concentric_penetration(rig):
    m_h, m_o = icosphere(3, 0.55), icosphere(3, 0.5)
    ident = Pose.identity(rig.n_bones)
    out = transfer(m_o, m_h, rig, ident, refine=True)
    human = m_h.replace(vertices=out.vertices[: m_h.n_vertices])
    assert penetration_count(human, m_o, normals=vertex_normals(m_h)) == 0
