import math

import numpy as np
import pytest

from tagbridge.errors import BehindCamera, DistortionInversionDiverged
from tagbridge.geometry import (
    CameraIntrinsics,
    Pose,
    Ray,
    RigidTransform,
    angles_from_rotation,
    apply_transform,
    distort_normalized,
    pixel_to_ray,
    project,
    project_points,
    rotation_from_angles,
    undistort_normalized,
)


def aerial_camera(**kw):
    # 50 mm lens on a 16 MPix sensor with 7.4 um pixels
    args = dict(f=50.0, pixel_pitch=0.0074, x0=2432.0, y0=1616.0, width=4864, height=3232)
    args.update(kw)
    return CameraIntrinsics(**args)


def nadir_pose(x=0.0, y=0.0, z=100.0):
    # omega = pi turns the viewing axis from world +Z to world -Z
    return Pose(t=np.array([x, y, z]), r=np.array([math.pi, 0.0, 0.0]))


def random_rotation(rng):
    return rotation_from_angles(rng.uniform(-math.pi / 2 + 0.1, math.pi / 2 - 0.1, 3))


class TestRotation:
    def test_zero_angles_identity(self):
        assert np.allclose(rotation_from_angles((0, 0, 0)), np.eye(3), atol=1e-15)

    def test_half_turn_about_x(self):
        R = rotation_from_angles((math.pi, 0, 0))
        assert np.allclose(R, np.diag([1.0, -1.0, -1.0]), atol=1e-15)

    def test_matches_elementary_composition(self):
        # independent construction from the three elementary matrices
        o, p, k = np.radians([10.0, 20.0, 30.0])
        Rx = np.array([[1, 0, 0], [0, math.cos(o), -math.sin(o)], [0, math.sin(o), math.cos(o)]])
        Ry = np.array([[math.cos(p), 0, math.sin(p)], [0, 1, 0], [-math.sin(p), 0, math.cos(p)]])
        Rz = np.array([[math.cos(k), -math.sin(k), 0], [math.sin(k), math.cos(k), 0], [0, 0, 1]])
        assert np.allclose(rotation_from_angles((o, p, k)), Rz @ Ry @ Rx, atol=1e-15)

    def test_always_proper_rotation(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            R = rotation_from_angles(rng.uniform(-2 * math.pi, 2 * math.pi, 3))
            assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12
            assert abs(np.linalg.det(R) - 1.0) < 1e-12

    def test_angles_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            angles = rng.uniform([-math.pi, -math.pi / 2 + 1e-3, -math.pi],
                                 [math.pi, math.pi / 2 - 1e-3, math.pi])
            R = rotation_from_angles(angles)
            back = angles_from_rotation(R)
            assert np.allclose(rotation_from_angles(back), R, atol=1e-12)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(3)
        angles = rng.uniform(-3, 3, (5, 3))
        batch = rotation_from_angles(angles)
        for i in range(5):
            assert np.array_equal(batch[i], rotation_from_angles(angles[i]))


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        cam = aerial_camera()
        px = project(cam, nadir_pose(), (0.0, 0.0, 0.0))
        assert np.allclose(px, (cam.x0, cam.y0), atol=1e-9)

    def test_offset_follows_similar_triangles(self):
        cam = aerial_camera()
        px = project(cam, nadir_pose(), (1.0, 0.0, 0.0))
        expected_offset = 50.0 * (1.0 / 100.0) / 0.0074
        assert abs(px[0] - cam.x0 - expected_offset) < 1e-9
        assert abs(expected_offset - 67.567567) < 1e-3
        assert abs(px[1] - cam.y0) < 1e-9

    def test_paper_class_camera_accepted(self):
        cam = aerial_camera(k=(0.0, -2.3e-5, 1.1e-9))
        assert cam.focal_px == pytest.approx(50.0 / 0.0074)

    def test_behind_camera_raises(self):
        cam = aerial_camera()
        with pytest.raises(BehindCamera):
            project(cam, nadir_pose(), (0.0, 0.0, 200.0))

    def test_project_points_masks_behind(self):
        cam = aerial_camera()
        pts = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 200.0]])
        px, in_front = project_points(cam, nadir_pose(), pts)
        assert in_front.tolist() == [True, False]
        assert np.all(np.isnan(px[1]))


class TestDistortion:
    def test_zero_k_is_identity(self):
        xy = np.array([[0.1, -0.2], [0.0, 0.0]])
        assert np.array_equal(undistort_normalized((), xy), xy)

    def test_round_trip_k1(self):
        k = (0.0, 0.1)
        rng = np.random.default_rng(5)
        xy = rng.uniform(-0.3, 0.3, (100, 2))
        back = undistort_normalized(k, distort_normalized(k, xy))
        # 1e-8 px at focal_px ~ 6757 means ~1.5e-12 in normalized units
        assert np.max(np.abs(back - xy)) < 1e-11

    def test_divergence_raises(self):
        with pytest.raises(DistortionInversionDiverged):
            undistort_normalized((0.0, -80.0), np.array([[0.5, 0.5]]))


class TestPixelToRay:
    def test_principal_point_gives_optical_axis(self):
        cam = aerial_camera()
        pose = nadir_pose()
        ray = pixel_to_ray(cam, pose, (cam.x0, cam.y0))
        assert np.allclose(ray.origin, pose.t)
        assert np.allclose(ray.direction, (0.0, 0.0, -1.0), atol=1e-12)

    def test_round_trip_ray_passes_through_point(self):
        cam = aerial_camera(k=(0.0, 0.05, -0.002))
        rng = np.random.default_rng(17)
        pose = Pose(t=np.array([3.0, -2.0, 120.0]), r=np.array([math.pi + 0.05, -0.03, 0.4]))
        for _ in range(50):
            point = np.array([rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-5, 5)])
            try:
                px = project(cam, pose, point)
            except BehindCamera:
                continue
            if not cam.in_bounds(px):
                continue
            ray = pixel_to_ray(cam, pose, px)
            depth = np.dot(point - ray.origin, ray.direction)
            closest = ray.point_at(depth)
            assert np.linalg.norm(closest - point) < 1e-9

    def test_out_of_bounds_warns(self, caplog):
        cam = aerial_camera()
        with caplog.at_level("WARNING", logger="tagbridge.geometry"):
            pixel_to_ray(cam, nadir_pose(), (-500.0, 10.0))
        assert any("outside" in r.message for r in caplog.records)


class TestRigidTransform:
    def test_identity(self):
        p = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(apply_transform(RigidTransform.identity(), p), p)

    def test_pure_translation(self):
        T = RigidTransform(np.eye(3), np.array([1.0, 2.0, 3.0]))
        assert np.allclose(apply_transform(T, np.zeros(3)), (1.0, 2.0, 3.0))

    def test_composition_matches_sequential_application(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            T1 = RigidTransform(random_rotation(rng), rng.uniform(-10, 10, 3))
            T2 = RigidTransform(random_rotation(rng), rng.uniform(-10, 10, 3))
            p = rng.uniform(-100, 100, 3)
            a = apply_transform(T2, apply_transform(T1, p))
            b = apply_transform(T2.compose(T1), p)
            assert np.linalg.norm(a - b) < 1e-12 * max(1.0, np.linalg.norm(a))

    def test_preserves_pairwise_distances_at_unit_scale(self):
        rng = np.random.default_rng(29)
        T = RigidTransform(random_rotation(rng), rng.uniform(-5, 5, 3))
        pts = rng.uniform(-50, 50, (20, 3))
        mapped = apply_transform(T, pts)
        d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        d1 = np.linalg.norm(mapped[:, None] - mapped[None, :], axis=-1)
        assert np.max(np.abs(d0 - d1)) < 1e-12 * max(1.0, d0.max())

    def test_inverse(self):
        rng = np.random.default_rng(31)
        T = RigidTransform(random_rotation(rng), rng.uniform(-5, 5, 3), scale=2.5)
        p = rng.uniform(-10, 10, 3)
        assert np.allclose(apply_transform(T.inverse(), apply_transform(T, p)), p, atol=1e-12)

    def test_rejects_improper_rotation(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


class TestValidation:
    def test_intrinsics_invariants(self):
        with pytest.raises(ValueError):
            aerial_camera(f=-1.0)
        with pytest.raises(ValueError):
            aerial_camera(pixel_pitch=0.0)
        with pytest.raises(ValueError):
            aerial_camera(x0=9999.0)

    def test_ray_requires_unit_direction(self):
        with pytest.raises(ValueError):
            Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))

    def test_pose_requires_finite(self):
        with pytest.raises(ValueError):
            Pose(t=np.array([np.nan, 0, 0]), r=np.zeros(3))
