import math

import numpy as np
import pytest

from orthosplat.geo3d import (Correspondence2D3D, DegenerateGeometryError,
                              Plane, Pose, Rotation, fit_ground_plane,
                              interpolate_pose, pose_offsets,
                              solve_orthographic_pose)

from oracles import interp_rotation_oracle, ortho_pixels, rodrigues


def random_pose(rng) -> Pose:
    axis = rng.normal(size=3)
    angle = rng.uniform(0, math.pi * 0.95)
    return Pose(Rotation.from_axis_angle(axis, angle), rng.uniform(-10, 10, 3))


class TestRotation:
    def test_unit_norm_and_orthonormal_matrix(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            r = Rotation(rng.normal(size=4))
            assert abs(np.linalg.norm(r.quat) - 1.0) < 1e-9
            m = r.as_matrix()
            assert abs(np.linalg.det(m) - 1.0) < 1e-9
            assert np.abs(m.T @ m - np.eye(3)).max() < 1e-9

    def test_matrix_roundtrip(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            m = rodrigues(rng.normal(size=3), rng.uniform(0, math.pi))
            r = Rotation.from_matrix(m)
            assert np.abs(r.as_matrix() - m).max() < 1e-9

    def test_log_near_pi_uses_largest_diagonal(self):
        m = rodrigues([0, 0, 1], math.pi)
        vec = Rotation.from_matrix(m).as_rotvec()
        assert abs(np.linalg.norm(vec) - math.pi) < 1e-7
        assert abs(abs(vec[2]) - math.pi) < 1e-7

    def test_rejects_bad_quaternion(self):
        with pytest.raises(ValueError):
            Rotation((0.0, 0.0, 0.0, 0.0))
        with pytest.raises(ValueError):
            Rotation((np.nan, 0, 0, 1))


class TestPose:
    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = random_pose(rng)
            ident = p.compose(p.inverse())
            assert np.abs(ident.rotation.as_matrix() - np.eye(3)).max() < 1e-9
            assert np.abs(ident.translation).max() < 1e-9

    def test_center(self):
        p = Pose(Rotation.from_axis_angle([0, 0, 1], 0.3), [1.0, -2.0, 5.0])
        c = p.center()
        assert np.abs(p.apply(c)).max() < 1e-12


class TestInterpolatePose:
    def test_endpoints_exact(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            prev, cand = random_pose(rng), random_pose(rng)
            p0 = interpolate_pose(prev, cand, 0.0)
            p1 = interpolate_pose(prev, cand, 1.0)
            assert np.abs(p0.rotation.as_matrix()
                          - prev.rotation.as_matrix()).max() < 1e-9
            assert np.abs(p0.translation - prev.translation).max() < 1e-9
            assert np.abs(p1.rotation.as_matrix()
                          - cand.rotation.as_matrix()).max() < 1e-9
            assert np.abs(p1.translation - cand.translation).max() < 1e-9

    def test_halfway_ninety_degrees_about_z(self):
        prev = Pose(Rotation.identity(), np.zeros(3))
        cand = Pose(Rotation.from_axis_angle([0, 0, 1], math.pi / 2),
                    np.zeros(3))
        mid = interpolate_pose(prev, cand, 0.5)
        expected = interp_rotation_oracle(np.eye(3),
                                          cand.rotation.as_matrix(), 0.5)
        assert np.abs(mid.rotation.as_matrix() - expected).max() < 1e-9
        assert np.abs(mid.rotation.as_matrix()
                      - rodrigues([0, 0, 1], math.pi / 4)).max() < 1e-9

    def test_geodesic_angle_scaling(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            prev, cand = random_pose(rng), random_pose(rng)
            rel_full = cand.rotation.compose(prev.rotation.inverse())
            full = rel_full.angle()
            for a in np.arange(0.1, 0.95, 0.1):
                mid = interpolate_pose(prev, cand, a)
                rel = mid.rotation.compose(prev.rotation.inverse())
                assert abs(rel.angle() - a * full) < 1e-9

    def test_fixed_point(self):
        rng = np.random.default_rng(6)
        p = random_pose(rng)
        for a in (0.0, 0.25, 0.5, 0.75, 1.0):
            q = interpolate_pose(p, p, a)
            assert np.abs(q.rotation.as_matrix()
                          - p.rotation.as_matrix()).max() < 1e-9
            assert np.abs(q.translation - p.translation).max() < 1e-9

    def test_center_blend(self):
        # the interpolated camera center is the linear blend of the centers
        rng = np.random.default_rng(7)
        for _ in range(20):
            prev, cand = random_pose(rng), random_pose(rng)
            a = rng.uniform(0.1, 0.9)
            mid = interpolate_pose(prev, cand, a)
            expect = (1 - a) * prev.center() + a * cand.center()
            assert np.abs(mid.center() - expect).max() < 1e-9

    def test_near_pi_relative_rotation(self):
        prev = Pose(Rotation.identity(), np.zeros(3))
        for angle in (math.pi, math.pi - 5e-8):
            cand = Pose(Rotation.from_axis_angle([1, 1, 0], angle), np.zeros(3))
            mid = interpolate_pose(prev, cand, 0.5)
            rel = mid.rotation.compose(prev.rotation.inverse())
            assert abs(rel.angle() - angle / 2) < 1e-7

    def test_rejects_invalid_weight(self):
        p = Pose.identity()
        with pytest.raises(ValueError):
            interpolate_pose(p, p, -0.1)
        with pytest.raises(ValueError):
            interpolate_pose(p, p, 1.5)
        with pytest.raises(ValueError):
            interpolate_pose(p, p, float("nan"))


class TestPoseOffsets:
    def test_identical_poses(self):
        rng = np.random.default_rng(8)
        p = random_pose(rng)
        d, t = pose_offsets(p, p)
        assert abs(d) < 1e-9 and abs(t) < 1e-9

    def test_translation_along_prev_x(self):
        rng = np.random.default_rng(9)
        prev = random_pose(rng)
        x_axis_world = prev.rotation.as_matrix()[0]
        cand_center = prev.center() + 3.0 * x_axis_world
        cand = Pose(prev.rotation, -prev.rotation.apply(cand_center))
        d, t = pose_offsets(prev, cand)
        assert abs(d - 3.0) < 1e-9
        assert abs(t) < 1e-9

    def test_rotation_about_prev_x(self):
        prev = Pose(Rotation.identity(), np.zeros(3))
        tilt = Rotation.from_axis_angle([1, 0, 0], math.radians(30))
        cand = Pose(tilt, np.zeros(3))  # same center (origin)
        d, t = pose_offsets(prev, cand)
        assert abs(d) < 1e-9
        assert abs(t - 30.0) < 1e-9


class TestFitGroundPlane:
    def test_exact_plane(self):
        rng = np.random.default_rng(10)
        pts = np.column_stack([rng.uniform(0, 10, (1000, 2)), np.zeros(1000)])
        plane = fit_ground_plane(pts, 0.01, 256, np.random.default_rng(0))
        assert abs(abs(plane.normal[2]) - 1.0) < 1e-9
        assert abs(plane.offset) < 1e-12

    def test_three_exact_points(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        plane = fit_ground_plane(pts, 0.01, 64, np.random.default_rng(0))
        assert abs(abs(plane.normal[2]) - 1.0) < 1e-9
        assert abs(plane.offset) < 1e-12

    def test_noise_and_outliers(self):
        rng = np.random.default_rng(11)
        inl = np.column_stack([rng.uniform(0, 10, (800, 2)),
                               rng.normal(0, 0.01, 800)])
        out = rng.uniform(0, 10, (200, 3))
        pts = np.vstack([inl, out])
        plane = fit_ground_plane(pts, 0.05, 1024, np.random.default_rng(1),
                                 orient_toward=[5, 5, 50])
        angle = math.degrees(math.acos(min(1.0, plane.normal @ [0, 0, 1.0])))
        assert angle < 1.0
        # reference: least-squares fit on the known inlier subset
        centered = inl - inl.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        ref = vt[2] if vt[2][2] > 0 else -vt[2]
        ref_angle = math.degrees(math.acos(min(1.0, abs(ref @ plane.normal))))
        assert ref_angle < 1.0

    def test_orientation_toward_cameras(self):
        rng = np.random.default_rng(12)
        pts = np.column_stack([rng.uniform(0, 10, (200, 2)), np.zeros(200)])
        up = fit_ground_plane(pts, 0.01, 64, np.random.default_rng(0),
                              orient_toward=[5, 5, 30])
        down = fit_ground_plane(pts, 0.01, 64, np.random.default_rng(0),
                                orient_toward=[5, 5, -30])
        assert up.normal[2] > 0.99
        assert down.normal[2] < -0.99

    def test_collinear_fails(self):
        pts = np.column_stack([np.linspace(0, 1, 50),
                               np.linspace(0, 2, 50),
                               np.linspace(0, -1, 50)])
        with pytest.raises(DegenerateGeometryError):
            fit_ground_plane(pts, 0.01, 64, np.random.default_rng(0))

    def test_rigid_invariance(self):
        rng = np.random.default_rng(13)
        pts = np.column_stack([rng.uniform(0, 10, (500, 2)),
                               rng.normal(0, 0.005, 500)])
        plane = fit_ground_plane(pts, 0.02, 256, np.random.default_rng(2))
        for trial in range(5):
            t = random_pose(rng)
            moved = t.apply(pts)
            plane_t = fit_ground_plane(moved, 0.02, 256,
                                       np.random.default_rng(2))
            n_expect = t.rotation.apply(plane.normal)
            # point on original plane, transformed, must lie on fitted plane
            p0 = -plane.offset * plane.normal
            d = plane_t.signed_distance(t.apply(p0))
            align = abs(float(n_expect @ plane_t.normal))
            assert align > 1.0 - 1e-6
            assert abs(d) < 1e-6


def make_matches(rng, n, rot, t, s_w, s_h, width, height,
                 noise_px=0.0, outliers=0):
    world = rng.uniform(-8, 8, (n, 3))
    world[:, 2] = rng.uniform(0, 4, n)
    t = np.array([t[0], t[1], -float((world @ rot.T)[:, 2].mean())])
    px = ortho_pixels(world, rot, t, s_w, s_h, width, height)
    px += rng.normal(0, noise_px, px.shape) if noise_px else 0.0
    if outliers:
        idx = rng.choice(n, size=outliers, replace=False)
        px[idx] = rng.uniform(0, width - 1, (outliers, 2))
    matches = [Correspondence2D3D(px[i], world[i]) for i in range(n)]
    return matches, Pose(Rotation.from_matrix(rot), t)


class TestSolveOrthographicPose:
    def test_noise_free_roundtrip(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            rot = rodrigues(rng.normal(size=3), rng.uniform(0, 0.6))
            matches, truth = make_matches(rng, 40, rot,
                                          rng.uniform(-3, 3, 2), 20, 20,
                                          256, 256)
            pose, inliers = solve_orthographic_pose(
                matches, (20, 20), 2.0, (256, 256), np.random.default_rng(0))
            rel = pose.rotation.compose(truth.rotation.inverse())
            assert rel.angle() < 1e-6
            assert np.abs(pose.translation - truth.translation).max() < 1e-6
            assert inliers == 40

    def test_identity_pose(self):
        rng = np.random.default_rng(15)
        world = rng.uniform(-5, 5, (30, 3))
        world[:, 2] -= world[:, 2].mean()  # canonical depth convention
        px = ortho_pixels(world, np.eye(3), np.zeros(3), 12, 12, 128, 128)
        matches = [Correspondence2D3D(px[i], world[i]) for i in range(30)]
        pose, _ = solve_orthographic_pose(matches, (12, 12), 1.0, (128, 128),
                                          np.random.default_rng(0))
        assert np.abs(pose.rotation.as_matrix() - np.eye(3)).max() < 1e-9
        assert np.abs(pose.translation).max() < 1e-9

    def test_outliers_and_noise(self):
        rng = np.random.default_rng(16)
        ok = 0
        for trial in range(100):
            rot = rodrigues(rng.normal(size=3), rng.uniform(0, 0.4))
            matches, truth = make_matches(rng, 100, rot,
                                          rng.uniform(-2, 2, 2), 20, 20,
                                          256, 256, noise_px=0.5, outliers=30)
            pose, inliers = solve_orthographic_pose(
                matches, (20, 20), 3.0, (256, 256),
                np.random.default_rng(trial))
            rel = pose.rotation.compose(truth.rotation.inverse())
            if math.degrees(rel.angle()) < 0.5:
                ok += 1
                assert inliers >= 65
        assert ok >= 95

    def test_too_few_matches(self):
        with pytest.raises(DegenerateGeometryError):
            solve_orthographic_pose(
                [Correspondence2D3D([0, 0], [0, 0, 0])] * 2,
                (10, 10), 1.0, (64, 64))

    def test_collinear_world_points_fail(self):
        line = [Correspondence2D3D([i * 10.0, 0.0], [i * 1.0, 0, 0])
                for i in range(10)]
        with pytest.raises(DegenerateGeometryError):
            solve_orthographic_pose(line, (10, 10), 1.0, (64, 64),
                                    np.random.default_rng(0))

    def test_roundtrip_property_random_poses(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            rot = rodrigues(rng.normal(size=3), rng.uniform(0, 0.5))
            matches, truth = make_matches(rng, 25, rot, rng.uniform(-4, 4, 2),
                                          16, 16, 200, 200)
            pose, _ = solve_orthographic_pose(matches, (16, 16), 1.0,
                                              (200, 200),
                                              np.random.default_rng(1))
            rel = pose.rotation.compose(truth.rotation.inverse())
            assert rel.angle() < 1e-6


class TestPlaneType:
    def test_normal_is_normalized(self):
        p = Plane([0, 0, 2.0], 4.0)
        assert abs(np.linalg.norm(p.normal) - 1.0) < 1e-12
        assert abs(p.offset - 2.0) < 1e-12
