import numpy as np
import pytest

from awsdf.geom import (
    CameraIntrinsics,
    Pose,
    angle_between_deg,
    backproject,
    compute_normal_map,
    is_rotation,
    project,
    rotation_about_axis,
    rotation_from_quat_xyzw,
    unit,
)

K = CameraIntrinsics(fx=200.0, fy=210.0, cx=159.5, cy=119.5, width=320, height=240)


def test_unit_and_rotation_helpers():
    v = unit([3.0, 0.0, 4.0])
    assert np.allclose(v, [0.6, 0.0, 0.8])
    with pytest.raises(ValueError):
        unit([0.0, 0.0, 0.0])

    R = rotation_about_axis([0, 0, 1], np.pi / 2)
    assert is_rotation(R)
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    # quaternion for 90 deg about z: (0, 0, sin45, cos45), xyzw
    q = np.array([0.0, 0.0, np.sqrt(0.5), np.sqrt(0.5)])
    assert np.allclose(rotation_from_quat_xyzw(q), R, atol=1e-12)
    with pytest.raises(ValueError):
        rotation_from_quat_xyzw([0.0, 0.0, 0.5, 0.5])


def test_pose_roundtrip_and_compose():
    rng = np.random.default_rng(3)
    R = rotation_about_axis(unit(rng.normal(size=3)), 1.1)
    p = Pose(R, rng.normal(size=3))
    x = rng.normal(size=(10, 3))
    back = p.inverse().transform_point(p.transform_point(x))
    assert np.allclose(back, x, atol=1e-12)
    both = p.compose(p.inverse())
    assert np.allclose(both.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(both.translation, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 2.0, np.zeros(3))


def test_project_backproject_inverse():
    # backproject(project(p)) == p to 1e-9 for in-frustum points with z > 0
    rng = np.random.default_rng(11)
    z = rng.uniform(0.3, 8.0, size=500)
    u = rng.uniform(0, K.width - 1, size=500)
    v = rng.uniform(0, K.height - 1, size=500)
    p = np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=1)
    uv = project(p, K)
    assert np.allclose(uv, np.stack([u, v], axis=1), atol=1e-9)

    # integer-pixel version through a depth image
    depth = np.zeros((K.height, K.width))
    depth[40, 100] = 2.5
    pts, valid = backproject(depth, K)
    assert valid[40, 100] and valid.sum() == 1
    assert abs(pts[40, 100, 2] - 2.5) < 1e-12
    uv = project(pts[40, 100], K)
    assert np.allclose(uv, [100, 40], atol=1e-9)


def test_ray_param_is_z_depth():
    d = K.ray_dirs_cam()
    assert d.shape == (240, 320, 3)
    assert np.all(d[..., 2] == 1.0)


def test_normal_map_frontoparallel_plane():
    # constant depth -> plane z = const, camera-facing normal (0, 0, -1)
    depth = np.full((K.height, K.width), 3.0)
    nm = compute_normal_map(depth, K)
    assert nm.valid[1:-1, 1:-1].all()
    assert not nm.valid[0].any() and not nm.valid[:, -1].any()
    n = nm.normals[nm.valid]
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    assert np.allclose(n, [0.0, 0.0, -1.0], atol=1e-9)


def test_normal_map_oblique_plane_analytic():
    # plane n . x = c rendered into depth; recovered normals must match n
    n_true = unit([0.3, -0.2, -1.0])
    c = -2.0  # plane in front of the camera, n . x = c with n_z < 0
    d = K.ray_dirs_cam()
    depth = c / np.einsum("ijk,k->ij", d, n_true)
    assert (depth > 0).all()
    nm = compute_normal_map(depth, K)
    errs = np.degrees(
        np.arccos(np.clip(nm.normals[nm.valid] @ n_true, -1, 1))
    )
    assert nm.valid[1:-1, 1:-1].all()
    assert errs.max() < 0.05  # degrees
    # orientation: every normal faces the camera
    P, _ = backproject(depth, K)
    dots = np.einsum("ijk,ijk->ij", nm.normals, P)[nm.valid]
    assert (dots < 0).all()


def test_normal_map_invalid_propagation():
    depth = np.full((K.height, K.width), 3.0)
    depth[50, 60] = 0.0
    nm = compute_normal_map(depth, K)
    # the hole and its 4-neighborhood become invalid
    assert not nm.valid[50, 60]
    assert not nm.valid[50, 61] and not nm.valid[50, 59]
    assert not nm.valid[49, 60] and not nm.valid[51, 60]
    assert nm.valid[52, 60] and nm.valid[50, 62]
    assert np.all(nm.normals[50, 60] == 0.0)


def test_normal_map_depth_discontinuity_normals_stay_unit():
    depth = np.full((K.height, K.width), 2.0)
    depth[:, 160:] = 6.0
    nm = compute_normal_map(depth, K)
    n = nm.normals[nm.valid]
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)


def test_camera_up_world():
    p = Pose(np.eye(3), np.zeros(3))
    assert np.allclose(p.camera_up_world, [0, -1, 0])
    assert np.allclose(angle_between_deg([1, 0, 0], [0, 1, 0]), 90.0)
