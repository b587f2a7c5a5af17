import math

import numpy as np
import pytest

from orthosplat.geo3d import Pose, Rotation
from orthosplat.splat import (GaussianPrimitive, GaussianScene,
                              PerspectiveCamera, VirtualOrthoCamera,
                              compositing_weights, init_primitives_from_points,
                              load_scene, ortho_jacobian, project_covariance,
                              project_orthographic, refit_colors, render,
                              save_scene)

from oracles import brute_force_render


def random_scene(rng, n, extent=6.0, scale=(0.2, 0.7)):
    return GaussianScene(rng.uniform(-extent / 2, extent / 2, (n, 3)),
                         rng.uniform(scale[0], scale[1], (n, 3)),
                         rng.normal(size=(n, 4)),
                         rng.uniform(0.3, 1.0, n),
                         rng.uniform(0, 1, (n, 3)))


def ortho_cam(s=8.0, px=64):
    return VirtualOrthoCamera(Pose.identity(), s, s, px, px)


class TestProjectOrthographic:
    def test_direct_substitution(self):
        uv = project_orthographic([1.0, 2.0, 5.0], 4.0, 8.0)
        assert np.allclose(uv, [0.5, 0.5])

    def test_depth_ignored(self):
        for z in (-100.0, 0.0, 3.0, 1e6):
            assert np.allclose(project_orthographic([0, 0, z], 3, 5), [0, 0])

    def test_left_edge(self):
        assert np.allclose(project_orthographic([-2.0, 0, 1], 4.0, 4.0),
                           [-1.0, 0.0])


class TestOrthoJacobian:
    def test_exact_values(self):
        assert np.array_equal(ortho_jacobian(2, 2), np.diag([1.0, 1.0, 0.0]))
        assert np.array_equal(ortho_jacobian(4, 8),
                              np.diag([0.5, 0.25, 0.0]))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(20)
        eps = 1e-6
        for _ in range(100):
            s_w, s_h = rng.uniform(0.5, 30, 2)
            x = rng.uniform(-10, 10, 3)
            jac = ortho_jacobian(s_w, s_h)
            for axis in range(3):
                d = np.zeros(3)
                d[axis] = eps
                fd = (project_orthographic(x + d, s_w, s_h)
                      - project_orthographic(x - d, s_w, s_h)) / (2 * eps)
                assert np.abs(fd - jac[:2, axis]).max() < 1e-6


class TestProjectCovariance:
    def test_isotropic_identity(self):
        prim = GaussianPrimitive([0, 0, 0], [1, 1, 1], Rotation.identity(),
                                 1.0, [1, 1, 1])
        cov = project_covariance(prim, Pose.identity(), ortho_jacobian(2, 2))
        assert np.allclose(cov, np.eye(2) * 1.3)

    def test_isotropy_under_camera_rotation(self):
        prim = GaussianPrimitive([0, 0, 0], [1, 1, 1], Rotation.identity(),
                                 1.0, [1, 1, 1])
        rot_cam = Pose(Rotation.from_axis_angle([0, 0, 1], math.pi / 2))
        a = project_covariance(prim, Pose.identity(), ortho_jacobian(2, 2))
        b = project_covariance(prim, rot_cam, ortho_jacobian(2, 2))
        assert np.allclose(a, b, atol=1e-12)

    def test_anisotropic_by_hand(self):
        prim = GaussianPrimitive([0, 0, 0], [2, 1, 1], Rotation.identity(),
                                 1.0, [1, 1, 1])
        cov = project_covariance(prim, Pose.identity(), ortho_jacobian(2, 2))
        assert np.allclose(cov, np.diag([4.3, 1.3]))

    def test_symmetric_positive(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            prim = GaussianPrimitive(rng.normal(size=3),
                                     rng.uniform(0.1, 3, 3),
                                     Rotation(rng.normal(size=4)),
                                     0.7, [0.5, 0.5, 0.5])
            pose = Pose(Rotation(rng.normal(size=4)), rng.normal(size=3))
            cov = project_covariance(prim, pose, ortho_jacobian(3, 5))
            assert abs(cov[0, 1] - cov[1, 0]) < 1e-12
            assert np.linalg.eigvalsh(cov).min() >= 0.3 - 1e-9


class TestRender:
    def test_single_primitive_center_pixel(self):
        # odd image size puts the camera axis exactly on a pixel center
        scene = GaussianScene([[0, 0, 5]], [[0.2, 0.2, 0.2]],
                              [[1, 0, 0, 0]], [1.0], [[1, 0, 0]])
        cam = VirtualOrthoCamera(Pose.identity(), 2.0, 2.0, 65, 65)
        img = render(scene, cam, background=(0, 0, 0))
        assert abs(img.pixels[32, 32, 0] - 0.999) < 1e-9
        assert img.pixels[32, 32, 1] == 0.0
        assert img.pixels[32, 32, 2] == 0.0

    def test_two_coincident_primitives(self):
        scene = GaussianScene([[0, 0, 5], [0, 0, 5]],
                              [[0.3, 0.3, 0.3]] * 2,
                              [[1, 0, 0, 0]] * 2, [0.5, 0.5],
                              [[1, 1, 1], [0, 0, 0]])
        cam = VirtualOrthoCamera(Pose.identity(), 2.0, 2.0, 65, 65)
        img = render(scene, cam, background=(0, 0, 0))
        assert np.allclose(img.pixels[32, 32], [0.5, 0.5, 0.5], atol=1e-9)

    def test_matches_brute_force_oracle_ortho(self):
        rng = np.random.default_rng(22)
        scene = random_scene(rng, 120)
        cam = ortho_cam(8.0, 48)
        img = render(scene, cam)
        ref = brute_force_render(scene, cam)
        assert np.abs(img.pixels - ref).max() <= 2.0 / 255.0

    def test_matches_brute_force_oracle_perspective(self):
        rng = np.random.default_rng(23)
        scene = random_scene(rng, 100)
        cam = PerspectiveCamera.looking_at([7, 5, 8], [0, 0, 0], 48, 48, 60.0)
        img = render(scene, cam)
        ref = brute_force_render(scene, cam)
        assert np.abs(img.pixels - ref).max() <= 2.0 / 255.0

    def test_compositing_partition(self):
        rng = np.random.default_rng(24)
        scene = random_scene(rng, 150)
        cam = ortho_cam(8.0, 32)
        img, pix, prim, wgt = compositing_weights(scene, cam)
        sums = np.zeros(32 * 32)
        np.add.at(sums, pix, wgt)
        total = sums + (1.0 - img.coverage).ravel()
        assert np.abs(total - 1.0).max() < 1e-6

    def test_depth_order_applied(self):
        # same scene, two primitives swapped in depth -> different color
        red_front = GaussianScene([[0, 0, 1], [0, 0, 2]],
                                  [[0.5] * 3] * 2, [[1, 0, 0, 0]] * 2,
                                  [0.9, 0.9], [[1, 0, 0], [0, 0, 1]])
        blue_front = GaussianScene([[0, 0, 2], [0, 0, 1]],
                                   [[0.5] * 3] * 2, [[1, 0, 0, 0]] * 2,
                                   [0.9, 0.9], [[1, 0, 0], [0, 0, 1]])
        cam = ortho_cam(4.0, 33)
        a = render(red_front, cam).pixels
        b = render(blue_front, cam).pixels
        assert np.abs(a - b).max() > 0.1

    def test_scene_order_irrelevant(self):
        # permuting the primitive list must not change the image (sorting)
        rng = np.random.default_rng(25)
        scene = random_scene(rng, 60)
        perm = rng.permutation(60)
        shuffled = GaussianScene(scene.means[perm], scene.scales[perm],
                                 scene.quats[perm], scene.opacities[perm],
                                 scene.colors[perm])
        cam = ortho_cam(8.0, 32)
        assert np.allclose(render(scene, cam).pixels,
                           render(shuffled, cam).pixels, atol=1e-12)

    def test_ortho_depth_invariance_bit_identical(self):
        rng = np.random.default_rng(26)
        scene = random_scene(rng, 200)
        cam = ortho_cam(8.0, 64)
        axis = cam.pose.view_axis()
        a = render(scene, cam, want_visibility=True)
        b = render(scene.translated(50.0 * axis), cam, want_visibility=True)
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.coverage, b.coverage)
        assert np.array_equal(a.visibility, b.visibility)

    def test_deterministic(self):
        rng = np.random.default_rng(27)
        scene = random_scene(rng, 80)
        cam = ortho_cam()
        assert np.array_equal(render(scene, cam).pixels,
                              render(scene, cam).pixels)

    def test_empty_scene_background(self):
        scene = GaussianScene(np.empty((0, 3)), np.empty((0, 3)),
                              np.empty((0, 4)), np.empty(0), np.empty((0, 3)))
        img = render(scene, ortho_cam(4.0, 16))
        assert np.allclose(img.pixels, 0.5)
        assert np.allclose(img.coverage, 0.0)

    def test_coverage_in_unit_range(self):
        rng = np.random.default_rng(28)
        img = render(random_scene(rng, 300), ortho_cam())
        assert img.coverage.min() >= 0.0
        assert img.coverage.max() <= 1.0

    def test_visibility_front_most(self):
        scene = GaussianScene([[0, 0, 1], [0, 0, 3]], [[0.4] * 3] * 2,
                              [[1, 0, 0, 0]] * 2, [0.9, 0.9],
                              [[1, 0, 0], [0, 1, 0]])
        img = render(scene, ortho_cam(4.0, 33), want_visibility=True)
        assert img.visibility[16, 16] == 0
        swapped = GaussianScene([[0, 0, 3], [0, 0, 1]], [[0.4] * 3] * 2,
                                [[1, 0, 0, 0]] * 2, [0.9, 0.9],
                                [[1, 0, 0], [0, 1, 0]])
        img2 = render(swapped, ortho_cam(4.0, 33), want_visibility=True)
        assert img2.visibility[16, 16] == 1


class TestInitPrimitives:
    def test_single_point_lower_clamp(self):
        scene = init_primitives_from_points([[1.0, 2.0, 3.0]], [[1, 0, 0]])
        assert np.allclose(scene.scales[0], 0.01)

    def test_regular_grid_scale(self):
        xs = np.arange(3, dtype=float)
        grid = np.array([[x, y, z] for x in xs for y in xs for z in xs])
        scene = init_primitives_from_points(grid, np.zeros((27, 3)))
        assert np.abs(scene.scales - 1.0).max() < 1e-9

    def test_colors_bit_exact(self):
        rng = np.random.default_rng(29)
        cols = rng.uniform(0, 1, (40, 3))
        scene = init_primitives_from_points(rng.normal(size=(40, 3)), cols)
        assert np.array_equal(scene.colors, cols)

    def test_opacity_and_orientation(self):
        scene = init_primitives_from_points(np.eye(3) * 4, np.zeros((3, 3)))
        assert np.allclose(scene.opacities, 0.8)
        assert np.allclose(scene.quats, [[1, 0, 0, 0]] * 3)


class TestRefitColors:
    def test_single_primitive_one_pixel(self):
        scene = GaussianScene([[0, 0, 5]], [[0.5] * 3], [[1, 0, 0, 0]],
                              [1.0], [[0.5, 0.5, 0.5]])
        cam = VirtualOrthoCamera(Pose.identity(), 2.0, 2.0, 1, 1)
        target = np.full((1, 1, 3), 0.0)
        target[0, 0] = [0.999, 0.0, 0.0]
        out = refit_colors(scene, [(cam, target)], background=(0, 0, 0))
        assert np.abs(out.colors[0] - [1.0, 0.0, 0.0]).max() < 1e-3

    def test_fixed_point(self):
        rng = np.random.default_rng(30)
        scene = random_scene(rng, 60)
        cams = [ortho_cam(8.0, 32),
                PerspectiveCamera.looking_at([6, -6, 7], [0, 0, 0], 32, 32, 40)]
        views = [(c, render(scene, c).pixels) for c in cams]
        out = refit_colors(scene, views)
        assert np.abs(out.colors - scene.colors).max() < 1e-6

    def test_recovers_true_colors(self):
        rng = np.random.default_rng(31)
        true_scene = random_scene(rng, 50)
        cams = [ortho_cam(8.0, 48),
                PerspectiveCamera.looking_at([6, 5, 8], [0, 0, 0], 48, 48, 60),
                PerspectiveCamera.looking_at([-7, 2, 8], [0, 0, 0], 48, 48, 60)]
        views = [(c, render(true_scene, c).pixels) for c in cams]
        start = true_scene.with_colors(np.full((50, 3), 0.5))
        out = refit_colors(start, views)

        weight_tot = np.zeros(50)
        for c in cams:
            _, _, prim, wgt = compositing_weights(true_scene, c)
            np.add.at(weight_tot, prim, wgt)
        strong = weight_tot >= 0.5
        assert strong.sum() > 10
        assert np.abs(out.colors[strong]
                      - true_scene.colors[strong]).max() < 1e-2

    def test_photometric_error_never_increases(self):
        rng = np.random.default_rng(32)
        scene = random_scene(rng, 40)
        cam = ortho_cam(8.0, 32)
        target = rng.uniform(0, 1, (32, 32, 3))
        before = float(((render(scene, cam).pixels - target) ** 2).sum())
        out = refit_colors(scene, [(cam, target)])
        after = float(((render(out, cam).pixels - target) ** 2).sum())
        assert after <= before + 1e-9


class TestSceneIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(33)
        scene = random_scene(rng, 25)
        path = tmp_path / "scene.ospl"
        save_scene(path, scene)
        back = load_scene(path)
        assert len(back) == 25
        assert np.abs(back.means - scene.means).max() < 1e-6
        assert np.abs(back.colors - scene.colors).max() < 1e-6
        # quaternions stored normalized; compare up to float32 rounding
        assert np.abs(np.abs((back.quats * scene.quats).sum(axis=1)) - 1).max() < 1e-6

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ospl"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_scene(path)

    def test_truncated(self, tmp_path):
        rng = np.random.default_rng(34)
        scene = random_scene(rng, 10)
        path = tmp_path / "scene.ospl"
        save_scene(path, scene)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_scene(path)


class TestPrimitiveValidation:
    def test_rejects_bad_fields(self):
        with pytest.raises(ValueError):
            GaussianPrimitive([0, 0, 0], [0, 1, 1], Rotation.identity(),
                              0.5, [0, 0, 0])
        with pytest.raises(ValueError):
            GaussianPrimitive([0, 0, 0], [1, 1, 1], Rotation.identity(),
                              0.0, [0, 0, 0])
        with pytest.raises(ValueError):
            GaussianPrimitive([0, 0, 0], [1, 1, 1], Rotation.identity(),
                              0.5, [0, 0, 1.5])

    def test_covariance_positive_definite(self):
        rng = np.random.default_rng(35)
        for _ in range(20):
            p = GaussianPrimitive(rng.normal(size=3), rng.uniform(0.1, 2, 3),
                                  Rotation(rng.normal(size=4)), 0.5,
                                  [0.2, 0.2, 0.2])
            assert np.linalg.eigvalsh(p.covariance()).min() > 0
