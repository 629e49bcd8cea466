import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dreamweave.camera import (CameraIntrinsics, DepthMap, Pose, clip_depth, intrinsics_from_fov, look_at,
                               normalize_disparity, project, unproject, yaw_pitch_pose)


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Pose(R, rng.normal(size=3))


def test_fov_90():
    assert intrinsics_from_fov(90, 200, 100).fx == pytest.approx(100.0, abs=1e-12)


def test_fov_120_closed_form():
    K = intrinsics_from_fov(120, 320, 180)
    assert K.fx == pytest.approx(160 / math.tan(math.radians(60)), rel=1e-15)
    assert K.fx == pytest.approx(92.376, abs=5e-4)
    assert (K.fy, K.cx, K.cy) == (K.fx, 160.0, 90.0)


def test_fov_boundaries():
    K = intrinsics_from_fov(179.9, 320, 180)
    assert K.fx == pytest.approx(160 * math.tan(math.radians(0.05)), rel=1e-12)
    for bad in (180, 0, -5, 200):
        with pytest.raises(ValueError):
            intrinsics_from_fov(bad, 320, 180)


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 4, 1, 4, 4)


def test_principal_point_unprojects_on_axis():
    K = intrinsics_from_fov(120, 320, 180)
    np.testing.assert_array_equal(unproject(K.cx, K.cy, 2.0, K), [0.0, 0.0, 2.0])


def test_project_unproject_round_trip():
    rng = np.random.default_rng(1)
    K = intrinsics_from_fov(120, 320, 180)
    u = rng.uniform(0, 320, 10_000)
    v = rng.uniform(0, 180, 10_000)
    z = rng.uniform(0.05, 50, 10_000)
    uv, zz, valid = project(unproject(u, v, z, K), K)
    assert valid.all()
    assert np.max(np.abs(uv[:, 0] - u)) <= 1e-9
    assert np.max(np.abs(uv[:, 1] - v)) <= 1e-9
    np.testing.assert_allclose(zz, z, rtol=0, atol=1e-12)


def test_behind_camera_is_flagged():
    K = intrinsics_from_fov(90, 64, 64)
    _, _, valid = project(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.1, 0.0, 1.0]]), K)
    assert valid.tolist() == [False, False, True]


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 2, np.zeros(3))


def test_pose_algebra():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        left = a.compose(b).compose(c)
        right = a.compose(b.compose(c))
        np.testing.assert_allclose(left.matrix(), right.matrix(), atol=1e-9)
        ident = a.compose(a.inverse())
        np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-9)
        p = rng.normal(size=(5, 3))
        np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-9)


def test_pose_array_round_trip():
    p = random_pose(np.random.default_rng(3))
    assert Pose.from_array(p.as_array()) == p


def test_look_at_and_yaw_pitch_agree():
    a = look_at((0, 0, 1), (1, 0, 1))
    b = yaw_pitch_pose((0, 0, 1))
    np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-15)
    # camera forward is world +x, camera right is world -y, camera down is world -z
    np.testing.assert_allclose(b.rotation[:, 2], [1, 0, 0])
    np.testing.assert_allclose(b.rotation[:, 0], [0, -1, 0])
    np.testing.assert_allclose(b.rotation[:, 1], [0, 0, -1])
    pitched = yaw_pitch_pose((0, 0, 1), pitch=0.3)
    assert pitched.rotation[2, 2] == pytest.approx(-math.sin(0.3))


def test_normalize_two_depths():
    np.testing.assert_array_equal(normalize_disparity(np.array([[2.0, 4.0]])), [[1.0, 0.0]])


def test_normalize_constant_is_zero():
    np.testing.assert_array_equal(normalize_disparity(np.full((3, 4), 3.0)), np.zeros((3, 4)))


def test_normalize_three_depths():
    # (1/z - 0.2) / (1 - 0.2): z=2 gives 0.3 / 0.8
    np.testing.assert_allclose(normalize_disparity(np.array([[1.0, 2.0, 5.0]])), [[1.0, 0.375, 0.0]],
                               rtol=0, atol=1e-15)


def test_normalize_accepts_depthmap_and_rejects_nonpositive():
    d = DepthMap(np.array([[1.0, 2.0]]), 0.1, 10.0)
    np.testing.assert_array_equal(normalize_disparity(d), [[1.0, 0.0]])
    with pytest.raises(ValueError):
        normalize_disparity(np.array([[0.0, 1.0]]))


depth_maps = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                    elements=st.floats(0.05, 100.0))


@settings(max_examples=200, deadline=None)
@given(depth_maps, st.floats(0.01, 100.0))
def test_normalize_properties(z, c):
    d = normalize_disparity(z)
    if np.all(z == z.flat[0]):
        assert np.all(d == 0)
    else:
        assert d.min() == 0.0 and d.max() == 1.0
    np.testing.assert_allclose(normalize_disparity(c * z), d, atol=1e-9)


def test_clip_depth_regimes():
    z = DepthMap(np.array([[7.0, 0.1, 1.5]]), 0.01, 10.0)
    far_clip = clip_depth(z, 0.01, 5.0)
    assert far_clip.z[0, 0] == 5.0
    near_clip = clip_depth(z, 0.28, 2.0)
    np.testing.assert_array_equal(near_clip.z, [[2.0, 0.28, 1.5]])
    assert clip_depth(near_clip, 0.28, 2.0).z.tolist() == near_clip.z.tolist()
    with pytest.raises(ValueError):
        clip_depth(z, 2.0, 1.0)
