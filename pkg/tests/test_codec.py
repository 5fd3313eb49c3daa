import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grouplane.codec import (
    Lane3D,
    LaneEncodeError,
    Orientation,
    SlotOutputs,
    classify_orientation,
    crossed_counts,
    decode,
    encode,
    orientation_axes,
    orientation_from_counts,
    resample_lane,
)
from grouplane.geometry import BevGridSpec

GRID = BevGridSpec()
V, H = Orientation.VERTICAL, Orientation.HORIZONTAL


def random_lane(seed: int, horizontal: bool = False) -> Lane3D:
    """Smooth lane single-valued along its main axis, partly inside the grid."""
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 1, size=int(rng.integers(2, 40))))
    t = np.unique(np.concatenate([[0.0, 1.0], t]))
    main = -20 + 140 * t if not horizontal else -15 + 30 * t
    a, b, c = rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-8, 8)
    lat = c + a * t + b * t * t
    if horizontal:
        lat = rng.uniform(5, 100) + a * t
        pts = np.stack([main, lat, rng.uniform(-0.3, 0.3) * np.sin(5 * t)], axis=1)
    else:
        pts = np.stack([lat, main, rng.uniform(-0.3, 0.3) * np.sin(5 * t)], axis=1)
    return Lane3D(pts, int(rng.integers(4)))


class TestLane:
    def test_validation(self):
        with pytest.raises(ValueError):
            Lane3D(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            Lane3D(np.array([[0, 0, 0], [0, 0, 0], [1, 1, 1]], dtype=float))
        with pytest.raises(ValueError):
            Lane3D(np.array([[0, 0, 0], [np.nan, 1, 1]]))

    def test_dict_round_trip(self):
        lane = Lane3D(np.array([[0.1, 2.0, 0.0], [0.3, 4.0, 0.1]]), 2, id=5, score=0.75)
        back = Lane3D.from_dict(lane.to_dict())
        assert np.array_equal(back.points, lane.points)
        assert (back.category, back.id, back.score) == (2, 5, 0.75)


class TestResample:
    def test_constant_lane(self):
        lane = Lane3D(np.array([[2.0, 0.0, 0.0], [2.0, 10.0, 0.0]]))
        pts = resample_lane(lane, [1.0, 5.0, 9.0])
        assert [p.tolist() for p in pts] == [[2.0, 1.0, 0.0], [2.0, 5.0, 0.0], [2.0, 9.0, 0.0]]

    def test_outside_span_is_absent(self):
        lane = Lane3D(np.array([[2.0, 0.0, 0.0], [2.0, 10.0, 0.0]]))
        assert resample_lane(lane, [-1.0, 11.0]) == [None, None]

    def test_quadratic_dense_polyline(self):
        y = np.linspace(0.0, 10.0, 1001)
        lane = Lane3D(np.stack([0.1 * y * y, y, np.zeros_like(y)], axis=1))
        (p,) = resample_lane(lane, [4.0])
        # chord error of a 0.01 m step on x = 0.1 y^2 is at most 0.1 * 0.01^2 / 4
        assert abs(p[0] - 1.6) <= 2.5e-6 and p[1] == 4.0 and p[2] == 0.0

    def test_rejects_unsorted_values(self):
        lane = Lane3D(np.array([[0.0, 0.0, 0.0], [0.0, 10.0, 0.0]]))
        with pytest.raises(ValueError):
            resample_lane(lane, [5.0, 1.0])

    def test_double_crossing_is_an_encode_error(self):
        lane = Lane3D(np.array([[0.0, 0.0, 0.0], [0.0, 10.0, 0.0], [1.0, 0.0, 0.0]]))
        with pytest.raises(LaneEncodeError):
            resample_lane(lane, [5.0])


class TestOrientation:
    def test_five_rows_one_column(self):
        g = BevGridSpec((0.0, 10.0), (0.0, 10.0), 10, 10)
        lane = Lane3D(np.array([[4.4, 2.2, 0.0], [4.6, 6.8, 0.0]]))
        assert crossed_counts(lane, g) == (5, 1)
        assert classify_orientation(lane, g) is V

    def test_outside_grid(self):
        lane = Lane3D(np.array([[50.0, 5.0, 0.0], [60.0, 8.0, 0.0]]))
        assert crossed_counts(lane, GRID) == (0, 0)
        with pytest.raises(LaneEncodeError):
            classify_orientation(lane, GRID)

    def test_diagonal_matches_raster_oracle(self):
        g = BevGridSpec((0.0, 4.0), (0.0, 4.0), 4, 4)
        lane = Lane3D(np.array([[0.1, 0.2, 0.0], [3.9, 3.7, 0.0]]))
        ys = np.linspace(0.2, 3.7, 100_001)
        xs = 0.1 + (ys - 0.2) * (3.8 / 3.5)
        rows = sum(bool(np.any(np.isclose(ys, yc, atol=1e-4))) for yc in g.row_centers)
        cols = sum(bool(np.any(np.isclose(xs, xc, atol=1e-4))) for xc in g.col_centers)
        assert crossed_counts(lane, g) == (rows, cols) == (4, 4)
        assert classify_orientation(lane, g) is V

    def test_count_rule(self):
        assert orientation_from_counts(5, 1) is V
        assert orientation_from_counts(1, 5) is H
        assert orientation_from_counts(3, 3) is V

    @given(st.integers(0, 100_000), st.booleans())
    def test_duality_under_transpose(self, seed, horizontal):
        lane = random_lane(seed, horizontal)
        counts = crossed_counts(lane, GRID)
        swapped = crossed_counts(lane.swapped_xy(), GRID.transposed())
        assert swapped == counts[::-1]
        if counts[0] != counts[1] and counts != (0, 0):
            a = classify_orientation(lane, GRID)
            b = classify_orientation(lane.swapped_xy(), GRID.transposed())
            assert a is not b


class TestEncode:
    def test_centered_lane(self):
        c = 30
        x = GRID.col_centers[c]
        lane = Lane3D(np.array([[x, 0.0, 0.0], [x, 120.0, 0.0]]))
        t = encode(lane, GRID, 4)
        assert t.orientation is V and t.exist == 1
        assert np.all(t.vis == 1) and np.all(t.row_idx == c)
        assert np.all(t.off_lat == 0.0) and np.all(t.off_z == 0.0)

    def test_translated_lane(self):
        x = GRID.col_centers[30] + 0.1
        lane = Lane3D(np.array([[x, 0.0, 0.0], [x, 120.0, 0.0]]))
        t = encode(lane, GRID, 4)
        np.testing.assert_allclose(t.off_lat, 0.1, atol=1e-12)
        assert np.all(t.row_idx == 30)

    @given(st.integers(0, 100_000))
    def test_nearest_center_oracle(self, seed):
        lane = random_lane(seed)
        try:
            t = encode(lane, GRID, 4, V)
        except LaneEncodeError:
            return
        pts = resample_lane(lane, GRID.row_centers)
        for h, p in enumerate(pts):
            inside = p is not None and GRID.x_range[0] <= p[0] <= GRID.x_range[1]
            if not inside:
                assert t.vis[h] == 0
                continue
            c = int(np.argmin(np.abs(GRID.col_centers - p[0])))
            assert t.vis[h] == 1 and t.row_idx[h] == c
            assert abs(t.off_lat[h] - (p[0] - GRID.col_centers[c])) < 1e-9
            assert abs(t.off_lat[h]) <= GRID.cell_w / 2 + 1e-12
            assert t.off_z[h] == pytest.approx(p[2], abs=1e-12)

    def test_errors(self):
        lane = Lane3D(np.array([[0.0, 10.0, 0.0], [0.0, 20.0, 0.0]]), category=7)
        with pytest.raises(LaneEncodeError):
            encode(lane, GRID, 4)
        outside = Lane3D(np.array([[50.0, 5.0, 0.0], [60.0, 8.0, 0.0]]))
        with pytest.raises(LaneEncodeError):
            encode(outside, GRID, 4)


class TestDecode:
    @given(st.integers(0, 100_000), st.booleans())
    def test_round_trip(self, seed, horizontal):
        lane = random_lane(seed, horizontal)
        try:
            t = encode(lane, GRID, 4)
        except LaneEncodeError:
            return
        ax = orientation_axes(GRID, t.orientation)
        slot = SlotOutputs.from_targets(t, len(ax.class_centers), 4)
        out = decode(slot, GRID)
        if t.vis.sum() < 2:
            assert out is None
            return
        axis = "y" if t.orientation is V else "x"
        ref = [p for p, v in zip(resample_lane(lane, ax.lines, axis), t.vis) if v]
        assert out.category == lane.category
        assert np.max(np.abs(out.points - np.array(ref))) <= 1e-9

    def test_low_existence_is_absent(self):
        x = GRID.col_centers[10]
        t = encode(Lane3D(np.array([[x, 0.0, 0.0], [x, 120.0, 0.0]])), GRID, 4)
        slot = SlotOutputs.from_targets(t, GRID.cols, 4)
        slot.exist = 0.3
        assert decode(slot, GRID, exist_thr=0.5) is None

    def test_noisy_logits_same_polyline(self, rng):
        lane = random_lane(3)
        t = encode(lane, GRID, 4)
        clean = SlotOutputs.from_targets(t, GRID.cols, 4)
        noisy = SlotOutputs.from_targets(t, GRID.cols, 4)
        noisy.row_probs = clean.row_probs * 0.6 + rng.uniform(0, 0.3, size=clean.row_probs.shape) / GRID.cols
        noisy.category_probs = clean.category_probs * 0.5 + 0.1
        a, b = decode(clean, GRID), decode(noisy, GRID)
        assert np.array_equal(a.points, b.points) and a.category == b.category

    def test_shape_mismatch(self):
        x = GRID.col_centers[10]
        t = encode(Lane3D(np.array([[x, 0.0, 0.0], [x, 120.0, 0.0]])), GRID, 4)
        slot = SlotOutputs.from_targets(t, GRID.cols + 1, 4)
        with pytest.raises(ValueError):
            decode(slot, GRID)
