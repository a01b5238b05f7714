import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from layercut.errors import AssetError, ConfigError
from layercut.mesh import TriMesh
from layercut.raster import Camera
from layercut.rig import (
    N_KEYPOINTS, Bone, Pose, Rig, blend_shape_offset, bone_transforms, keypoints_3d, lbs_forward,
    load_pose, load_rig, nn_skinning_weights, pose_keypoints_2d, posed_world, save_pose, save_rig, skin_points,
)
from layercut.synthetic import JOINTS, random_pose


def two_bone_rig(weights=None):
    v = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [2, 1, 0]])
    f = np.array([[0, 1, 3], [1, 2, 3]])
    rest1 = np.eye(4)
    rest1[:3, 3] = [1, 0, 0]
    bones = (Bone("a", -1, np.eye(4)), Bone("b", 0, rest1))
    w = weights if weights is not None else np.array([[1.0, 0], [0.5, 0.5], [0, 1], [0, 1]])
    z = np.zeros((4, 3, 10))
    return Rig(bones, TriMesh(v, f), w, z, z)


def test_rig_validation():
    rig = two_bone_rig()
    with pytest.raises(ValueError):
        two_bone_rig(np.array([[1.0, 0.1], [0.5, 0.5], [0, 1], [0, 1]]))
    with pytest.raises(ValueError):
        Rig((Bone("b", 1, np.eye(4)), Bone("a", -1, np.eye(4))), rig.template, rig.weights,
            rig.shape_basis, rig.expression_basis)
    with pytest.raises(ValueError):
        Rig(rig.bones, rig.template, rig.weights, np.zeros((3, 3, 10)), rig.expression_basis)


def test_hand_computed_two_bone_pose():
    rig = two_bone_rig()
    theta = np.zeros((2, 3))
    theta[1] = [0, 0, math.pi / 2]
    posed = skin_points(rig, Pose(theta), rig.template.vertices).posed
    # bone b rotates 90 degrees about z around its joint at (1, 0, 0)
    assert np.allclose(posed[0], [0, 0, 0])
    assert np.allclose(posed[2], [1, 1, 0])
    assert np.allclose(posed[3], [0, 1, 0])
    assert np.allclose(posed[1], [1, 0, 0])  # joint is fixed under both transforms


def test_transforms_definition(rig):
    pose = random_pose(rig, np.random.default_rng(0))
    T = bone_transforms(rig, pose)
    assert np.allclose(T, posed_world(rig, pose) @ np.linalg.inv(rig.rest_world))
    assert np.allclose(bone_transforms(rig, Pose.identity(rig.n_bones)), np.eye(4))
    assert np.allclose(rig.joints_rest(), JOINTS)


def test_identity_pose_is_identity(rig):
    out = lbs_forward(rig.template, rig, Pose.identity(rig.n_bones))
    assert np.abs(out.vertices - rig.template.vertices).max() <= 1e-6


def test_root_rotation_equivariance(rig):
    rng = np.random.default_rng(11)
    for _ in range(10):
        pose = random_pose(rig, rng)
        rv = rng.normal(size=3)
        base = skin_points(rig, pose, rig.template.vertices).posed
        rotated = skin_points(rig, pose.with_root(rv), rig.template.vertices).posed
        assert np.abs(rotated - base @ Rotation.from_rotvec(rv).as_matrix().T).max() < 1e-9


def test_posed_point_is_convex_combination(rig):
    pose = random_pose(rig, np.random.default_rng(5))
    T = bone_transforms(rig, pose)
    x = rig.template.vertices + blend_shape_offset(rig, pose)
    posed = skin_points(rig, pose, rig.template.vertices).posed
    per_bone = np.einsum("bij,vj->vbi", T[:, :3, :3], x) + T[None, :, :3, 3]
    assert np.allclose(posed, np.einsum("vb,vbi->vi", rig.weights, per_bone))


def test_blend_shapes_apply_in_canonical_space(rig):
    beta = np.zeros(10)
    beta[0] = 1.5
    psi = np.zeros(10)
    psi[3] = -2.0
    pose = Pose(np.zeros((rig.n_bones, 3)), beta, psi)
    out = lbs_forward(rig.template, rig, pose)
    expect = rig.template.vertices + 1.5 * rig.shape_basis[:, :, 0] - 2.0 * rig.expression_basis[:, :, 3]
    assert np.allclose(out.vertices, expect)


def test_nearest_vertex_ties_go_to_lowest_index():
    rig = two_bone_rig()
    assert rig.nearest_vertex(np.array([[0.5, 0, 0]]))[0] == 0
    assert rig.nearest_vertex(np.array([[1.5, 0, 0]]))[0] == 1
    assert np.allclose(nn_skinning_weights(rig, np.array([[1.9, 0.1, 0]])), [[0, 1]])


def test_skinning_backward_matches_finite_differences(rig):
    pose = random_pose(rig, np.random.default_rng(2))
    pts = rig.template.vertices[::97] + 1e-3
    sk = skin_points(rig, pose, pts)
    g = np.random.default_rng(3).standard_normal(sk.posed.shape)
    ana = sk.backward(g)
    h = 1e-6
    for axis in range(3):
        d = np.zeros(3)
        d[axis] = h
        fd = (np.sum(g * skin_points(rig, pose, pts + d).posed) - np.sum(g * skin_points(rig, pose, pts - d).posed))
        # nearest vertex fixed for these tiny steps, so the map is affine per point
        assert fd / (2 * h) == pytest.approx(ana[:, axis].sum(), rel=1e-6)


def test_pose_canonicalizes_rotation_vectors():
    theta = np.array([[0, 0, 1.5 * math.pi]])
    p = Pose(theta)
    assert np.linalg.norm(p.theta[0]) <= math.pi + 1e-12
    assert np.allclose(Rotation.from_rotvec(p.theta[0]).as_matrix(), Rotation.from_rotvec(theta[0]).as_matrix())
    with pytest.raises(ValueError):
        Pose(np.array([[np.nan, 0, 0]]))


def test_keypoints(rig):
    ident = Pose.identity(rig.n_bones)
    kp = keypoints_3d(rig, ident)
    assert kp.shape == (N_KEYPOINTS, 3)
    assert np.allclose(kp[1], JOINTS[2])  # neck slot maps to the neck joint
    assert np.allclose(kp[0], JOINTS[3] + [0, 0, 0.15])  # nose: head joint plus offset
    cam = Camera(3.0, 0.0, 0.0, math.pi / 3, 64, 64)
    uv, vis = pose_keypoints_2d(rig, ident, cam)
    assert vis.all()
    assert np.allclose(uv, cam.project(kp)[0])
    # camera sitting between the keypoints: the ones behind it are flagged invisible
    inside = Camera(0.05, 0.0, 0.0, math.pi / 3, 64, 64)
    _, vis = pose_keypoints_2d(rig, ident, inside)
    assert not vis.all() and vis.any()


def test_rig_and_pose_roundtrip(tmp_path, rig):
    save_rig(rig, tmp_path / "rig.json")
    back = load_rig(tmp_path / "rig.json")
    assert back.n_bones == rig.n_bones
    assert np.allclose(back.weights, rig.weights, atol=1e-6)
    assert np.allclose(back.weights.sum(axis=1), 1.0, atol=1e-12)
    pose = random_pose(rig, np.random.default_rng(4))
    save_pose(pose, tmp_path / "pose.json")
    p2 = load_pose(tmp_path / "pose.json")
    a = skin_points(rig, pose, rig.template.vertices).posed
    b = skin_points(back, p2, back.template.vertices).posed
    assert np.abs(a - b).max() < 1e-5


def test_rig_file_errors(tmp_path):
    with pytest.raises(AssetError):
        load_rig(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text('{"bones": 3}')
    with pytest.raises(ConfigError):
        load_rig(tmp_path / "bad.json")
    (tmp_path / "pose.json").write_text('{"beta": []}')
    with pytest.raises(ConfigError):
        load_pose(tmp_path / "pose.json")


def test_pose_bone_count_mismatch(rig):
    with pytest.raises(ValueError):
        lbs_forward(rig.template, rig, Pose.identity(rig.n_bones - 1))
