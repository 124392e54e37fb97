"""Core raster/mesh/camera primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terraforge.core import (
    CameraView,
    Intrinsics,
    RasterGrid,
    TexturedMesh,
    bilinear_sample,
    face_normal,
    load_raster_png,
    look_at,
    resolution_embedding,
    save_raster_png,
)
from terraforge.errors import ContractError, GeometryError, SamplingError


class TestRasterGrid:
    def test_shape_normalization(self):
        r = RasterGrid(np.zeros((4, 5)), gsd=2.0)
        assert (r.height, r.width, r.channels) == (4, 5, 1)

    def test_rejects_bad_gsd(self):
        with pytest.raises(ContractError):
            RasterGrid(np.zeros((2, 2, 3)), gsd=0.0)
        with pytest.raises(ContractError):
            RasterGrid(np.zeros((2, 2, 3)), gsd=-1.0)

    def test_world_pixel_origin(self):
        r = RasterGrid(np.zeros((2, 2, 1)), gsd=4.0, anchor=(64.0, -128.0))
        assert r.world_pixel_origin() == (16, -32)
        off = RasterGrid(np.zeros((2, 2, 1)), gsd=4.0, anchor=(3.0, 0.0))
        with pytest.raises(ContractError):
            off.world_pixel_origin()

    def test_crop_tracks_anchor(self):
        r = RasterGrid(np.arange(24.0).reshape(4, 6, 1), gsd=2.0, anchor=(10.0, 50.0))
        c = r.crop(2, 1, 3, 2)
        assert c.anchor == (14.0, 48.0)  # x grows east, y shrinks with rows
        assert np.array_equal(c.data[:, :, 0], r.data[1:3, 2:5, 0])


class TestBilinearSample:
    def test_integer_coordinates_exact(self):
        data = np.arange(12.0).reshape(3, 4, 1)
        r = RasterGrid(data, gsd=1.0)
        for y in range(3):
            for x in range(4):
                assert bilinear_sample(r, x, y)[0] == data[y, x, 0]

    def test_center_of_2x2(self):
        # [[0, 1], [2, 3]] at (0.5, 0.5) -> mean of the four = 1.5
        r = RasterGrid(np.array([[0.0, 1.0], [2.0, 3.0]]), gsd=1.0)
        assert bilinear_sample(r, 0.5, 0.5)[0] == pytest.approx(1.5)

    def test_out_of_range_raises(self):
        r = RasterGrid(np.zeros((2, 2, 1)), gsd=1.0)
        with pytest.raises(SamplingError):
            bilinear_sample(r, -0.01, 0.0)
        with pytest.raises(SamplingError):
            bilinear_sample(r, 0.0, 1.01)

    def test_far_edge_is_valid(self):
        r = RasterGrid(np.array([[1.0, 2.0], [3.0, 4.0]]), gsd=1.0)
        assert bilinear_sample(r, 1.0, 1.0)[0] == 4.0

    @given(
        x=st.floats(0.0, 2.0),
        y=st.floats(0.0, 2.0),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=60, deadline=None)
    def test_value_within_neighborhood_hull(self, x, y, seed):
        data = np.random.RandomState(seed).rand(3, 3, 2)
        out = bilinear_sample(data, x, y)
        x0, y0 = int(np.floor(min(x, 1.0))), int(np.floor(min(y, 1.0)))
        hood = data[y0 : y0 + 2, x0 : x0 + 2]
        for c in range(2):
            assert hood[:, :, c].min() - 1e-12 <= out[c] <= hood[:, :, c].max() + 1e-12

    def test_vectorized_matches_scalar(self):
        data = np.random.RandomState(3).rand(4, 5, 3)
        xs = np.array([0.0, 1.3, 3.9])
        ys = np.array([0.2, 2.7, 1.0])
        batch = bilinear_sample(data, xs, ys)
        for i in range(3):
            assert np.allclose(batch[i], bilinear_sample(data, xs[i], ys[i]))


class TestResolutionEmbedding:
    def test_direct_evaluation_dim4(self):
        # oracle: periods for dim=4 are (1, 10); entries interleave sin/cos of ln(64)/w
        ln = np.log(64.0)
        expected = np.array([np.sin(ln), np.cos(ln), np.sin(ln / 10), np.cos(ln / 10)])
        assert np.allclose(resolution_embedding(64, 4), expected, atol=0, rtol=0)

    def test_ladder_scales_pairwise_distinct(self):
        embs = [resolution_embedding(s, 16) for s in (64.0, 16.0, 4.0, 1.0)]
        for i in range(len(embs)):
            for j in range(i + 1, len(embs)):
                assert np.max(np.abs(embs[i] - embs[j])) > 1e-6

    def test_unit_norm_pairs(self):
        e = resolution_embedding(2.5, 8)
        pair_norms = e[0::2] ** 2 + e[1::2] ** 2
        assert np.allclose(pair_norms, 1.0)

    def test_domain_errors(self):
        with pytest.raises(ContractError):
            resolution_embedding(0.0, 4)
        with pytest.raises(ContractError):
            resolution_embedding(-2.0, 4)
        with pytest.raises(ContractError):
            resolution_embedding(1.0, 5)


def _unit_triangle_mesh(vertices):
    v = np.asarray(vertices, dtype=float)
    return TexturedMesh(
        v,
        np.array([[0, 1, 2]]),
        np.zeros((1, 3, 2)),
        RasterGrid(np.zeros((2, 2, 3)), gsd=1.0),
        np.zeros(1, dtype=np.uint8),
        np.ones(1, dtype=bool),
    )


class TestFaceNormal:
    def test_ground_triangle_points_up(self):
        mesh = _unit_triangle_mesh([[0, 0, 0], [1, 0, 0], [1, 1, 0]])
        assert np.allclose(face_normal(mesh, 0), [0, 0, 1])

    def test_wall_triangle_is_horizontal_normal(self):
        mesh = _unit_triangle_mesh([[0, 0, 0], [0, 0, 3], [1, 0, 3]])
        n = face_normal(mesh, 0)
        assert abs(n[2]) < 1e-12 and np.isclose(np.linalg.norm(n), 1.0)

    def test_degenerate_raises(self):
        mesh = _unit_triangle_mesh([[0, 0, 0], [1, 1, 1], [2, 2, 2]])
        with pytest.raises(GeometryError):
            face_normal(mesh, 0)


class TestCamera:
    def test_look_at_projects_target_to_principal_point(self):
        intr = Intrinsics.from_fov(60.0, 64, 64)
        cam = look_at([10.0, -5.0, 8.0], [0.0, 0.0, 1.0], intr)
        uv, z = cam.project(np.array([[0.0, 0.0, 1.0]]))
        assert z[0] > 0
        assert np.allclose(uv[0], [intr.cx, intr.cy], atol=1e-9)

    def test_camera_center_round_trip(self):
        intr = Intrinsics.from_fov(45.0, 32, 32)
        cam = look_at([3.0, 4.0, 5.0], [0.0, 0.0, 0.0], intr)
        assert np.allclose(cam.center, [3.0, 4.0, 5.0])

    def test_image_y_points_down_in_world(self):
        # a point above the target must land at smaller v than the target
        intr = Intrinsics.from_fov(60.0, 64, 64)
        cam = look_at([10.0, 0.0, 2.0], [0.0, 0.0, 2.0], intr)
        uv_hi, _ = cam.project(np.array([[0.0, 0.0, 3.0]]))
        uv_lo, _ = cam.project(np.array([[0.0, 0.0, 1.0]]))
        assert uv_hi[0, 1] < uv_lo[0, 1]

    def test_straight_down_rejected(self):
        intr = Intrinsics.from_fov(60.0, 8, 8)
        with pytest.raises(GeometryError):
            look_at([0.0, 0.0, 10.0], [0.0, 0.0, 0.0], intr)


class TestRasterIO:
    def test_png_round_trip_8bit(self, tmp_path):
        data = np.random.RandomState(0).rand(6, 7, 3)
        r = RasterGrid(data, gsd=2.0, anchor=(8.0, -4.0))
        p = save_raster_png(r, tmp_path / "img.png")
        back = load_raster_png(p)
        assert back.gsd == 2.0 and back.anchor == (8.0, -4.0)
        assert np.max(np.abs(back.data - data)) <= 0.5 / 255 + 1e-12

    def test_png_round_trip_16bit_range(self, tmp_path):
        data = np.random.RandomState(1).rand(5, 5, 1) * 120.0 - 3.0
        r = RasterGrid(data, gsd=1.0)
        p = save_raster_png(r, tmp_path / "h.png", bits=16, value_range=(-3.0, 117.0))
        back = load_raster_png(p)
        assert np.max(np.abs(back.data - data)) <= 0.5 * 120.0 / 65535 + 1e-9
