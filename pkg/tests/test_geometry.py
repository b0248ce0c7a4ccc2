import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossloc.errors import ConfigError
from crossloc.geometry import (CameraIntrinsics, PoseSE3, backproject, compose, invert, look_at, project,
                               project_points, random_rotation, rot_z, rotation_error_deg, translation_error)

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def test_identity_projects_principal_point():
    assert np.allclose(project([0, 0, 5], PoseSE3.identity(), K), [320, 240])


def test_point_behind_camera_is_not_projected():
    assert project([0, 0, -1], PoseSE3.identity(), K) is None


def test_bad_intrinsics():
    with pytest.raises(ConfigError):
        CameraIntrinsics(-1, 1, 1, 1, 4, 4)
    with pytest.raises(ConfigError):
        CameraIntrinsics(1, 1, 10, 1, 4, 4)


@given(st.integers(0, 2**31 - 1))
def test_project_backproject_roundtrip(seed):
    rng = np.random.default_rng(seed)
    pose = PoseSE3(random_rotation(rng), rng.normal(size=3))
    uv = rng.uniform([0, 0], [640, 480])
    depth = rng.uniform(0.5, 80)
    X = backproject(uv, depth, pose, K)
    assert np.allclose(project(X, pose, K), uv, atol=1e-7)


@given(st.integers(0, 2**31 - 1))
def test_compose_with_inverse_is_identity(seed):
    rng = np.random.default_rng(seed)
    a = PoseSE3(random_rotation(rng), rng.normal(size=3) * 10)
    e = compose(a, invert(a))
    assert np.allclose(e.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(e.translation, 0, atol=1e-12)


def test_batch_projection_matches_single(rng):
    pose = PoseSE3(random_rotation(rng), [0, 0, 20])
    P = rng.normal(size=(50, 3))
    uv, z = project_points(P, pose, K)
    for p, q in zip(P, uv):
        assert np.allclose(project(p, pose, K), q)


def test_pose_errors():
    a = PoseSE3(np.eye(3), [0, 0, 0])
    b = PoseSE3(rot_z(30), [0, 0, 0])
    assert rotation_error_deg(a.rotation, b.rotation) == pytest.approx(30)
    c = PoseSE3(np.eye(3), [3, 4, 0])
    assert translation_error(a, c) == pytest.approx(5)


def test_look_at_points_optical_axis_at_target():
    pose = look_at([1, 2, 3], [10, -4, 2])
    assert np.allclose(project([10, -4, 2], pose, K), [K.cx, K.cy])
    assert np.allclose(pose.center(), [1, 2, 3])
