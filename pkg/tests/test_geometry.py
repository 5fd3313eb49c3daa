import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grouplane.geometry import (
    BevGridSpec,
    CameraRig,
    DepthBins,
    build_frustum,
    frustum_cache_size,
    lift_splat,
    project_ego_to_image,
    project_points,
    unproject_pixel,
)
from grouplane.tensor import Tensor

RIG = CameraRig.forward_facing((64, 160), focal=100.0, height=1.5, pitch_deg=8.0)
GRID = BevGridSpec()
BINS = DepthBins(2.0, 104.0, 16)


class TestRig:
    def test_rejects_bad_intrinsics(self):
        K = RIG.intrinsics.copy()
        K[1, 0] = 1.0
        with pytest.raises(ValueError):
            CameraRig(K, RIG.extrinsics, (64, 160))
        K = RIG.intrinsics.copy()
        K[0, 0] = -1.0
        with pytest.raises(ValueError):
            CameraRig(K, RIG.extrinsics, (64, 160))

    def test_rejects_improper_rotation(self):
        T = RIG.extrinsics.copy()
        T[:3, 0] *= -1.0  # reflection, det -1
        with pytest.raises(ValueError):
            CameraRig(RIG.intrinsics, T, (64, 160))
        T = RIG.extrinsics.copy()
        T[0, 0] = 1.0 + 1e-6
        with pytest.raises(ValueError):
            CameraRig(RIG.intrinsics, T, (64, 160))

    def test_dict_round_trip(self):
        assert CameraRig.from_dict(RIG.to_dict()) == RIG


class TestProjection:
    def test_optical_axis(self):
        axis_world = RIG.extrinsics[:3, :3] @ np.array([0.0, 0.0, 1.0])
        p = RIG.extrinsics[:3, 3] + 7.5 * axis_world
        u, v, d = project_ego_to_image(p, RIG)
        assert (u, v) == pytest.approx((80.0, 32.0), abs=1e-9)
        assert d == pytest.approx(7.5, abs=1e-12)

    def test_behind_and_outside(self):
        assert project_ego_to_image([0.0, -5.0, 0.0], RIG) is None
        assert project_ego_to_image([500.0, 5.0, 0.0], RIG) is None

    @given(st.floats(1e-6, 159.99), st.floats(1e-6, 63.99), st.floats(0.5, 120))
    def test_unproject_then_project(self, u, v, depth):
        p = unproject_pixel(u, v, depth, RIG)
        uu, vv, dd = project_ego_to_image(p, RIG)
        assert abs(uu - u) < 1e-9 and abs(vv - v) < 1e-9 and abs(dd - depth) < 1e-9
        assert np.linalg.norm(unproject_pixel(uu, vv, dd, RIG) - p) < 1e-9

    def test_unproject_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            unproject_pixel(1.0, 1.0, 0.0, RIG)

    def test_corner_pixel_at_far_depth_is_inside_view_bounds(self):
        p = unproject_pixel(0.0, 0.0, BINS.d_max, RIG)
        uv, depth = project_points(p[None], RIG)
        assert depth[0] == pytest.approx(BINS.d_max)
        assert np.allclose(uv[0], [0.0, 0.0], atol=1e-9)


class TestGrid:
    def test_centers_inside(self):
        assert GRID.row_centers[0] > GRID.y_range[0] and GRID.row_centers[-1] < GRID.y_range[1]
        assert np.allclose(np.diff(GRID.col_centers), GRID.cell_w)

    def test_cell_index(self):
        assert GRID.cell_index(GRID.col_centers[3], GRID.row_centers[2]) == 2 * GRID.cols + 3
        assert GRID.cell_index(-11.0, 50.0) == -1
        assert GRID.cell_index(0.0, 103.0) == -1

    def test_depth_bins(self):
        c = DepthBins(1.0, 60.0, 32).centers
        assert len(c) == 32 and np.all(np.diff(c) > 0)
        with pytest.raises(ValueError):
            DepthBins(5.0, 1.0, 4)
        with pytest.raises(ValueError):
            DepthBins(1.0, 5.0, 1)


class TestFrustum:
    def test_consistent_with_unproject(self, rng):
        fr = build_frustum(RIG, BINS, (4, 10), GRID)
        assert fr.size == 4 * 10 * BINS.count
        for _ in range(3):
            d, p = int(rng.integers(BINS.count)), int(rng.integers(40))
            u, v = fr.pixel_uv[p]
            pt = unproject_pixel(u, v, BINS.centers[d], RIG)
            assert fr.cells[d, p] == GRID.cell_index(pt[0], pt[1])

    def test_cached(self):
        a = build_frustum(RIG, BINS, (4, 10), GRID)
        n = frustum_cache_size()
        assert build_frustum(RIG, BINS, (4, 10), GRID) is a
        assert frustum_cache_size() == n
        build_frustum(RIG.translated(dx=0.5), BINS, (4, 10), GRID)
        assert frustum_cache_size() == n + 1

    def test_camera_facing_away_gives_empty_table(self):
        T = RIG.extrinsics.copy()
        T[:3, :3] = np.diag([-1.0, -1.0, 1.0]) @ T[:3, :3]  # rotate 180 degrees about z
        away = CameraRig(RIG.intrinsics, T, RIG.image_size)
        assert np.all(build_frustum(away, BINS, (4, 10), GRID).cells == -1)


def splat(ctx, probs, rig=RIG, grid=GRID, bins=BINS):
    return lift_splat(Tensor(ctx), Tensor(probs), rig, bins, grid).data


class TestLiftSplat:
    def test_one_hot_single_cell(self):
        fr = build_frustum(RIG, BINS, (4, 10), GRID)
        d, p = map(int, np.argwhere(fr.cells >= 0)[0])
        ctx = np.zeros((1, 3, 4, 10))
        ctx[0, :, p // 10, p % 10] = [1.5, -2.0, 0.25]
        probs = np.zeros((1, BINS.count, 4, 10))
        probs[0, d, p // 10, p % 10] = 1.0
        out = splat(ctx, probs)
        r, c = divmod(int(fr.cells[d, p]), GRID.cols)
        expected = np.zeros_like(out)
        expected[0, :, r, c] = [1.5, -2.0, 0.25]
        assert np.array_equal(out, expected)

    def test_uniform_depth_splits_context_by_bin_count(self):
        fr = build_frustum(RIG, BINS, (4, 10), GRID)
        p = int(np.argmax((fr.cells >= 0).sum(axis=0)))
        ctx = np.zeros((1, 2, 4, 10))
        ctx[0, :, p // 10, p % 10] = [3.0, 1.0]
        probs = np.zeros((1, BINS.count, 4, 10))
        probs[0, :, p // 10, p % 10] = 1.0 / BINS.count
        out = splat(ctx, probs)[0].reshape(2, -1)
        cells, counts = np.unique(fr.cells[:, p][fr.cells[:, p] >= 0], return_counts=True)
        for cell, k in zip(cells, counts):
            np.testing.assert_allclose(out[:, cell], np.array([3.0, 1.0]) * k / BINS.count, rtol=1e-14)

    @given(st.integers(0, 10_000))
    def test_mass_conservation(self, seed):
        rng = np.random.default_rng(seed)
        ctx = rng.standard_normal((2, 3, 4, 10))
        logits = rng.standard_normal((2, BINS.count, 4, 10))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        out = splat(ctx, probs)
        fr = build_frustum(RIG, BINS, (4, 10), GRID)
        inside = (fr.cells >= 0).reshape(1, BINS.count, 4, 10)
        expected = np.einsum("bdp,bcp->bc", (probs * inside).reshape(2, BINS.count, -1), ctx.reshape(2, 3, -1))
        got = out.sum(axis=(2, 3))
        assert np.all(np.abs(got - expected) <= 1e-6 * np.maximum(np.abs(expected), 1.0))

    def test_lateral_translation_shifts_one_column(self, rng):
        rig = CameraRig.forward_facing((64, 160), focal=100.0, height=1.5, pitch_deg=8.0)
        moved = rig.translated(dx=GRID.cell_w)
        ctx = rng.standard_normal((1, 2, 4, 10))
        probs = rng.random((1, BINS.count, 4, 10))
        # keep only frustum points whose cell stays interior for both rigs
        fa = build_frustum(rig, BINS, (4, 10), GRID)
        fb = build_frustum(moved, BINS, (4, 10), GRID)
        col = np.where(fa.cells >= 0, fa.cells % GRID.cols, -1)
        interior = (fa.cells >= 0) & (col < GRID.cols - 1) & (fb.cells == fa.cells + 1)
        probs = probs * interior.reshape(1, BINS.count, 4, 10)
        a = splat(ctx, probs, rig)
        b = splat(ctx, probs, moved)
        np.testing.assert_allclose(b[..., 1:], a[..., :-1], atol=1e-12)
        assert np.all(b[..., 0] == 0.0)
        assert interior.sum() > 20

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            splat(np.zeros((1, 2, 4, 10)), np.zeros((1, BINS.count - 1, 4, 10)))
        with pytest.raises(ValueError):
            splat(np.zeros((2, 4, 10)), np.zeros((1, BINS.count, 4, 10)))
