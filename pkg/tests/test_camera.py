"""Projection, grid scaling and noise injection."""

import numpy as np
import pytest

from vgreg.camera import (
    CameraModel,
    inject_pixel_noise,
    project_to_pixels,
    scale_to_grid,
)
from vgreg.errors import ConfigError
from vgreg.geometry import RigidTransform


@pytest.fixture
def camera():
    return CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=644, height=484)


class TestProjection:
    def test_optical_axis_hits_principal_point(self, camera):
        mapping = project_to_pixels(np.array([[0.0, 0.0, 1.0]]), camera)
        assert mapping.valid[0]
        np.testing.assert_allclose(mapping.pixels[0], [320.0, 240.0])

    def test_hand_evaluated_projection(self, camera):
        mapping = project_to_pixels(np.array([[0.64, 0.0, 1.0]]), camera)
        np.testing.assert_allclose(mapping.pixels[0], [640.0, 240.0])

    def test_behind_camera_is_masked(self, camera):
        mapping = project_to_pixels(np.array([[0.0, 0.0, -1.0]]), camera)
        assert not mapping.valid[0]

    def test_out_of_image_is_masked(self, camera):
        mapping = project_to_pixels(np.array([[10.0, 0.0, 1.0]]), camera)
        assert not mapping.valid[0]

    def test_extrinsics_applied_first(self, camera):
        ext = RigidTransform(np.eye(3), np.array([0.0, 0.0, 2.0]))
        cam = CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                          width=644, height=484, extrinsics=ext)
        mapping = project_to_pixels(np.array([[0.0, 0.0, -1.0]]), cam)
        assert mapping.valid[0]
        np.testing.assert_allclose(mapping.pixels[0], [320.0, 240.0])

    def test_back_projection_recovers_coordinates(self, camera):
        rng = np.random.default_rng(0)
        z = rng.uniform(0.5, 4.0, size=50)
        x = rng.uniform(-0.5, 0.5, size=50) * z
        y = rng.uniform(-0.4, 0.4, size=50) * z
        pts = np.column_stack([x, y, z])
        mapping = project_to_pixels(pts, camera)
        assert mapping.valid.all()
        x_back = (mapping.pixels[:, 0] - camera.cx) * z / camera.fx
        y_back = (mapping.pixels[:, 1] - camera.cy) * z / camera.fy
        np.testing.assert_allclose(x_back, x, atol=1e-9)
        np.testing.assert_allclose(y_back, y, atol=1e-9)

    def test_invalid_intrinsics_rejected(self):
        with pytest.raises(ConfigError):
            CameraModel(fx=-1.0, fy=500.0, cx=0, cy=0, width=10, height=10)


class TestScaleToGrid:
    def scaled(self, camera, pixels):
        mapping = project_to_pixels(np.zeros((len(pixels), 3)) + [0, 0, 1], camera)
        mapping.pixels = np.asarray(pixels, dtype=float)
        mapping.valid = np.ones(len(pixels), dtype=bool)
        return scale_to_grid(mapping, (camera.width, camera.height), (46, 34))

    def test_origin_maps_to_cell_zero(self, camera):
        out = self.scaled(camera, [[0.0, 0.0]])
        np.testing.assert_array_equal(out.grid_indices[0], [0, 0])

    def test_hand_case_u100(self, camera):
        # floor(100 * 46 / 644) = floor(7.1428) = 7
        out = self.scaled(camera, [[100.0, 0.0]])
        assert out.grid_indices[0, 0] == 7

    def test_last_cell(self, camera):
        out = self.scaled(camera, [[643.9, 0.0]])
        assert out.grid_indices[0, 0] == 45

    def test_monotone_in_u_and_v(self, camera):
        rng = np.random.default_rng(1)
        u = np.sort(rng.uniform(0, 643.99, size=200))
        v = np.sort(rng.uniform(0, 483.99, size=200))
        out = self.scaled(camera, np.column_stack([u, v]))
        assert np.all(np.diff(out.grid_indices[:, 0]) >= 0)
        assert np.all(np.diff(out.grid_indices[:, 1]) >= 0)

    def test_grid_cell_is_14px_region_when_w_matches(self):
        cam = CameraModel(fx=500.0, fy=500.0, cx=322.0, cy=238.0, width=644, height=476)
        rng = np.random.default_rng(2)
        pixels = np.column_stack([
            rng.uniform(0, 643.99, size=500), rng.uniform(0, 475.99, size=500)
        ])
        mapping = project_to_pixels(np.tile([[0, 0, 1.0]], (500, 1)), cam)
        mapping.pixels = pixels
        out = scale_to_grid(mapping, (644, 476), (46, 34))
        np.testing.assert_array_equal(out.grid_indices[:, 0], (pixels[:, 0] // 14).astype(int))
        np.testing.assert_array_equal(out.grid_indices[:, 1], (pixels[:, 1] // 14).astype(int))


class TestNoise:
    def make_mapping(self, camera, n=200, seed=0):
        rng = np.random.default_rng(seed)
        z = rng.uniform(1.0, 3.0, size=n)
        pts = np.column_stack([
            rng.uniform(-0.3, 0.3, n) * z, rng.uniform(-0.2, 0.2, n) * z, z
        ])
        return project_to_pixels(pts, camera)

    def test_sigma_zero_is_bit_identical(self, camera):
        mapping = self.make_mapping(camera)
        out = inject_pixel_noise(mapping, 0.0, seed=7, camera=camera)
        assert out is mapping

    def test_fixed_seed_is_deterministic(self, camera):
        mapping = self.make_mapping(camera)
        out1 = inject_pixel_noise(mapping, 5.0, seed=7, camera=camera)
        out2 = inject_pixel_noise(mapping, 5.0, seed=7, camera=camera)
        np.testing.assert_array_equal(out1.pixels, out2.pixels)
        np.testing.assert_array_equal(out1.valid, out2.valid)

    def test_noise_standard_deviation(self, camera):
        # statistical check on the generator contract: sd within 3% of sigma
        mapping = self.make_mapping(camera, n=5000, seed=1)
        out = inject_pixel_noise(mapping, 5.0, seed=3, camera=camera)
        both = mapping.valid & out.valid
        added = (out.pixels - mapping.pixels)[both].ravel()
        assert added.size > 5000
        assert abs(added.std() - 5.0) / 5.0 < 0.03

    def test_validity_reevaluated(self, camera):
        mapping = self.make_mapping(camera)
        mapping.pixels[0] = [0.5, 0.5]  # near the border: noise can push it out
        out = inject_pixel_noise(mapping, 50.0, seed=0, camera=camera)
        assert out.valid.sum() < mapping.valid.sum()

    def test_negative_sigma_rejected(self, camera):
        with pytest.raises(ConfigError):
            inject_pixel_noise(self.make_mapping(camera), -1.0, 0, camera)


class TestCameraJson:
    def test_round_trip(self, tmp_path, camera):
        path = tmp_path / "cam.json"
        camera.save(path)
        loaded = CameraModel.load(path)
        assert loaded == camera

    def test_round_trip_with_extrinsics(self, tmp_path):
        ext = RigidTransform(np.eye(3), np.array([1.0, 2.0, 3.0]))
        cam = CameraModel(fx=500.0, fy=501.0, cx=320.0, cy=240.0,
                          width=640, height=480, extrinsics=ext)
        path = tmp_path / "cam.json"
        cam.save(path)
        loaded = CameraModel.load(path)
        np.testing.assert_array_equal(loaded.extrinsics.translation, [1, 2, 3])

    def test_missing_field_is_config_error(self, tmp_path):
        path = tmp_path / "cam.json"
        path.write_text('{"fx": 500}')
        with pytest.raises(ConfigError):
            CameraModel.load(path)
