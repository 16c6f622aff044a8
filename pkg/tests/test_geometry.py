import numpy as np
import pytest

from partfield import geometry as geo


def test_rot6d_identity_from_canonical_basis():
    np.testing.assert_allclose(geo.rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3), atol=1e-12)


def test_rot6d_scale_invariant():
    np.testing.assert_allclose(geo.rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3), atol=1e-12)
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = rng.normal(size=6)
        scaled = c.copy()
        scaled[:3] *= 10.0
        np.testing.assert_allclose(
            geo.rot6d_to_matrix(c), geo.rot6d_to_matrix(scaled), atol=1e-9
        )


def test_rot6d_swapped_axes_is_valid_rotation():
    r = geo.rot6d_to_matrix([0, 1, 0, 1, 0, 0])
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_rot6d_degenerate_inputs():
    with pytest.raises(geo.DegenerateRotationError):
        geo.rot6d_to_matrix([0, 0, 0, 1, 0, 0])
    with pytest.raises(geo.DegenerateRotationError):
        geo.rot6d_to_matrix([1, 0, 0, 2, 0, 0])


def test_rot6d_roundtrip_random():
    rng = np.random.default_rng(2)
    for _ in range(100):
        r = geo.random_rotation(rng)
        np.testing.assert_allclose(geo.rot6d_to_matrix(geo.matrix_to_rot6d(r)), r, atol=1e-12)


def test_compose_invert_identities():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = geo.RigidTransform(geo.random_rotation(rng), rng.normal(size=3))
        b = geo.RigidTransform(geo.random_rotation(rng), rng.normal(size=3))
        ab = a.compose(b)
        inv = ab.invert()
        ref = b.invert().compose(a.invert())
        np.testing.assert_allclose(inv.rotation, ref.rotation, atol=1e-9)
        np.testing.assert_allclose(inv.translation, ref.translation, atol=1e-9)
        x = rng.normal(size=3)
        np.testing.assert_allclose(inv.apply(ab.apply(x)), x, atol=1e-9)


def test_world_to_local_examples():
    ident = geo.RigidTransform.identity()
    np.testing.assert_allclose(geo.world_to_local([1, 2, 3], ident), [1, 2, 3])
    shifted = geo.RigidTransform(np.eye(3), [1, 0, 0])
    np.testing.assert_allclose(geo.world_to_local([1, 0, 0], shifted), [0, 0, 0])
    rot_z = geo.RigidTransform(geo.axis_angle_matrix([0, 0, 1], np.pi / 2), [0, 0, 0])
    np.testing.assert_allclose(geo.world_to_local([1, 0, 0], rot_z), [0, -1, 0], atol=1e-12)


def test_world_local_roundtrip():
    rng = np.random.default_rng(4)
    for _ in range(50):
        pose = geo.RigidTransform(geo.random_rotation(rng), rng.normal(size=3))
        x = rng.normal(size=3)
        np.testing.assert_allclose(geo.local_to_world(geo.world_to_local(x, pose), pose), x, atol=1e-9)


def _default_camera(width=64, height=48):
    k = np.array([[70.0, 0.0, width / 2], [0.0, 70.0, height / 2], [0.0, 0.0, 1.0]])
    return geo.Camera(k, geo.RigidTransform.identity(), width, height)


def test_generate_ray_principal_point():
    cam = _default_camera()
    ray = geo.generate_ray(cam, cam.width // 2, cam.height // 2, jitter=(-0.5, -0.5))
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(ray.origin, [0, 0, 0], atol=1e-12)


def test_adjacent_pixels_differ_by_inverse_focal():
    cam = _default_camera()
    v = cam.height // 2
    r1 = geo.generate_ray(cam, cam.width // 2 - 1, v, jitter=(-0.5, -0.5))
    r2 = geo.generate_ray(cam, cam.width // 2, v, jitter=(-0.5, -0.5))
    angle = np.arccos(np.clip(r1.direction @ r2.direction, -1, 1))
    assert angle == pytest.approx(1.0 / 70.0, rel=5e-3)


def test_generate_ray_out_of_bounds():
    cam = _default_camera()
    with pytest.raises(ValueError):
        geo.generate_ray(cam, cam.width, 0)


def test_project_ray_roundtrip_random_cameras():
    rng = np.random.default_rng(5)
    for _ in range(5):
        pose = geo.RigidTransform(geo.random_rotation(rng), rng.normal(size=3))
        k = np.array([[60 + rng.random() * 40, 0, 32], [0, 60 + rng.random() * 40, 32], [0, 0, 1]])
        cam = geo.Camera(k, pose, 64, 64)
        for _ in range(200):
            u = int(rng.integers(0, 64))
            v = int(rng.integers(0, 64))
            jitter = tuple(rng.uniform(-0.5, 0.5, size=2))
            ray = geo.generate_ray(cam, u, v, jitter)
            for s in (0.5, 2.0, 7.3):
                uv = cam.project(ray.at(s))
                np.testing.assert_allclose(uv, [u + 0.5 + jitter[0], v + 0.5 + jitter[1]], atol=1e-8)


def test_project_rejects_camera_center():
    cam = _default_camera()
    with pytest.raises(ValueError):
        cam.project(cam.center)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        geo.Camera(np.array([[70.0, 0, 32], [1.0, 70, 32], [0, 0, 1]]), geo.RigidTransform.identity(), 64, 64)
    with pytest.raises(ValueError):
        geo.Camera(np.array([[-70.0, 0, 32], [0, 70, 32], [0, 0, 1]]), geo.RigidTransform.identity(), 64, 64)


def test_ray_sphere_interval():
    hit = geo.ray_sphere_interval([0, 0, -3], [0, 0, 1], 1.0)
    assert hit == pytest.approx((2.0, 4.0))
    assert geo.ray_sphere_interval([0, 5, -3], [0, 0, 1], 1.0) is None


def test_look_at_points_camera_at_target():
    cam_pose = geo.look_at([2, 1, 1], [0, 0, 0])
    fwd_world = cam_pose.rotation[2]  # third row: camera z-axis in world coords
    expected = -np.array([2.0, 1.0, 1.0])
    np.testing.assert_allclose(fwd_world / np.linalg.norm(fwd_world), expected / np.linalg.norm(expected), atol=1e-12)
    np.testing.assert_allclose(cam_pose.apply(np.zeros(3))[:2], [0, 0], atol=1e-12)
