import numpy as np
import pytest

from tridiff import camera as cam


class TestDefaultCamera:
    def test_paper_constants(self):
        pose, intr = cam.default_camera()
        np.testing.assert_array_equal(pose.rotation[0], [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(pose.rotation,
                                      np.diag([1.0, -1.0, -1.0]))
        np.testing.assert_array_equal(pose.translation, [0.0, 0.0, 2.7])
        assert intr.fx == intr.fy == 5.4
        assert intr.cx == intr.cy == 0.5

    def test_orthonormality(self):
        pose, _ = cam.default_camera()
        np.testing.assert_allclose(pose.rotation.T @ pose.rotation,
                                   np.eye(3), atol=1e-12)

    def test_vertical_fov(self):
        _, intr = cam.default_camera()
        fov = 2.0 * np.arctan(0.5 / intr.fy)
        assert abs(np.rad2deg(fov) - 10.5802) < 1e-3


class TestNovelPoses:
    def test_zero_offsets_reproduce_input_pose(self):
        pose = cam.pose_from_angles(0.0, 0.0)
        base, _ = cam.default_camera()
        np.testing.assert_array_equal(pose.rotation, base.rotation)
        np.testing.assert_array_equal(pose.translation, base.translation)

    def test_offset_pose_radius_and_lookat(self):
        pose = cam.pose_from_angles(np.deg2rad(35.0), 0.0)
        assert abs(np.linalg.norm(pose.translation) - 2.7) < 1e-12
        # principal ray through the origin: origin - center is parallel to fwd
        fwd = pose.rotation[:, 2]
        residual = np.cross(fwd, -pose.translation)
        assert np.linalg.norm(residual) < 1e-9

    def test_uniformity_of_draws(self):
        rng = np.random.default_rng(0)
        az = []
        for _ in range(10_000):
            p = cam.sample_novel_pose(rng)
            az.append(np.rad2deg(np.arctan2(p.translation[0], p.translation[2])))
        az = np.asarray(az)
        assert -35.0 <= az.min() <= -33.0
        assert 33.0 <= az.max() <= 35.0

    def test_lookat_invariant_over_draws(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = cam.sample_novel_pose(rng)
            fwd = p.rotation[:, 2]
            assert np.linalg.norm(np.cross(fwd, -p.translation)) < 1e-9

    def test_excessive_range_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            cam.sample_novel_pose(rng, azimuth_range_deg=120.0)
        with pytest.raises(ValueError):
            cam.sample_novel_pose(rng, polar_range_deg=91.0)

    def test_deterministic_under_fixed_rng(self):
        p1 = cam.sample_novel_pose(np.random.default_rng(3))
        p2 = cam.sample_novel_pose(np.random.default_rng(3))
        assert np.array_equal(p1.rotation, p2.rotation)
        assert np.array_equal(p1.translation, p2.translation)


class TestRays:
    def test_center_pixel_direction(self):
        pose, intr = cam.default_camera()
        d = cam.pixel_direction(pose, intr, 0.5, 0.5)
        np.testing.assert_allclose(d, [0.0, 0.0, -1.0], atol=1e-12)

    def test_all_directions_unit_norm(self):
        pose, intr = cam.default_camera()
        bundle = cam.cast_rays(pose, intr, 16)
        norms = np.linalg.norm(bundle.directions, axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_corner_ray_angle(self):
        pose, intr = cam.default_camera()
        d = cam.pixel_direction(pose, intr, 0.0, 0.0)
        principal = cam.pixel_direction(pose, intr, 0.5, 0.5)
        angle = np.arccos(np.clip(d @ principal, -1, 1))
        expect = np.arctan(np.sqrt(2.0) * 0.5 / 5.4)
        assert abs(angle - expect) < 1e-12

    def test_near_far_attached(self):
        pose, intr = cam.default_camera()
        bundle = cam.cast_rays(pose, intr, 4)
        assert bundle.near == 2.25 and bundle.far == 5.0

    def test_resolution_consistency(self):
        # pixel centers of a k-grid coincide with centers of the 3k-grid
        # at indices 3i+1; those rays must match bitwise
        pose, intr = cam.default_camera()
        k = 4
        fine = cam.cast_rays(pose, intr, 3 * k)
        coarse = cam.cast_rays(pose, intr, k)
        fine_dirs = fine.directions.reshape(3 * k, 3 * k, 3)
        sub = fine_dirs[1::3, 1::3].reshape(-1, 3)
        assert np.array_equal(sub, coarse.directions)


class TestDisparitySampling:
    def _bundle(self):
        pose, intr = cam.default_camera()
        return cam.cast_rays(pose, intr, 2)

    def test_endpoints(self):
        s = cam.sample_disparity(self._bundle(), 2)
        np.testing.assert_allclose(s.depths, [2.25, 5.0], atol=1e-12)

    def test_harmonic_midpoint(self):
        s = cam.sample_disparity(self._bundle(), 3)
        expect = 2.0 / (1.0 / 2.25 + 1.0 / 5.0)
        assert abs(s.depths[1] - expect) < 1e-12

    def test_deltas_increase(self):
        s = cam.sample_disparity(self._bundle(), 16)
        assert np.all(np.diff(s.deltas) > 0)

    def test_monotone_and_bounded(self):
        s = cam.sample_disparity(self._bundle(), 32)
        assert np.all(np.diff(s.depths) > 0)
        assert s.depths[0] >= 2.25 - 1e-12
        assert s.depths[-1] <= 5.0 + 1e-12

    def test_disparity_equal_spacing(self):
        s = cam.sample_disparity(self._bundle(), 9)
        disp = 1.0 / s.depths
        np.testing.assert_allclose(np.diff(disp), np.diff(disp)[0], atol=1e-12)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            cam.sample_disparity(self._bundle(), 1)

    def test_jitter_stays_sorted_and_bounded(self):
        rng = np.random.default_rng(5)
        s = cam.sample_disparity(self._bundle(), 16, jitter=True, rng=rng)
        assert np.all(np.diff(s.depths) > 0)
        assert 2.25 - 1e-9 <= s.depths[0] and s.depths[-1] <= 5.0 + 1e-9
