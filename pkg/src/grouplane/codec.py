"""Lanes as row-wise classification targets on the BEV grid.

A vertical lane is described per grid row (the line ``y = row center``) by
the column it crosses plus a lateral offset from that column's center; a
horizontal lane is the same construction with x and y swapped.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import BevGridSpec

_DEDUP_TOL = 1e-9


class Orientation(enum.Enum):
    VERTICAL = "vertical"
    HORIZONTAL = "horizontal"


class LaneEncodeError(ValueError):
    """The lane cannot be represented row-wise on the grid."""


@dataclass
class Lane3D:
    points: np.ndarray
    category: int = 0
    id: int | None = None
    score: float | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"lane points must be [n, 3], got {pts.shape}")
        if len(pts) < 2:
            raise ValueError("a lane needs at least 2 points")
        if not np.isfinite(pts).all():
            raise ValueError("lane coordinates must be finite")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise ValueError("consecutive lane points must be distinct")
        self.points = pts
        self.category = int(self.category)

    def to_dict(self) -> dict:
        d = {"points": self.points.tolist(), "category": self.category}
        if self.id is not None:
            d["id"] = self.id
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Lane3D":
        return cls(np.array(d["points"], dtype=np.float64), d.get("category", 0), d.get("id"),
                   d.get("score"))

    def swapped_xy(self) -> "Lane3D":
        return Lane3D(self.points[:, [1, 0, 2]], self.category, self.id, self.score)


@dataclass
class LaneTargets:
    orientation: Orientation
    exist: int
    vis: np.ndarray  # [H] in {0, 1}
    row_idx: np.ndarray  # [H] int, -1 where invisible
    off_lat: np.ndarray  # [H] meters from the chosen cell center
    off_z: np.ndarray  # [H] absolute z
    category: int

    @property
    def n_lines(self) -> int:
        return len(self.vis)


@dataclass
class SlotOutputs:
    """Head outputs of one candidate slot, as plain arrays."""

    exist: float
    vis: np.ndarray  # [H]
    row_probs: np.ndarray  # [H, W]
    category_probs: np.ndarray  # [G]
    off_lat: np.ndarray  # [H]
    off_z: np.ndarray  # [H]
    orientation: Orientation = Orientation.VERTICAL

    @classmethod
    def from_targets(cls, t: LaneTargets, n_classes: int, G: int) -> "SlotOutputs":
        """The exact outputs a perfect network would give for ``t``."""
        H = t.n_lines
        probs = np.zeros((H, n_classes))
        vis = t.vis.astype(bool)
        probs[np.nonzero(vis)[0], t.row_idx[vis]] = 1.0
        cat = np.zeros(G)
        cat[t.category] = 1.0
        return cls(float(t.exist), t.vis.astype(np.float64), probs, cat,
                   np.where(vis, t.off_lat, 0.0), np.where(vis, t.off_z, 0.0), t.orientation)


@dataclass(frozen=True)
class _Axes:
    """Which coordinate indexes the lines and which one is classified."""

    line_axis: int
    class_axis: int
    lines: np.ndarray = field(repr=False)
    class_centers: np.ndarray = field(repr=False)
    class_lo: float
    cell: float


def orientation_axes(grid: BevGridSpec, orientation: Orientation) -> _Axes:
    if orientation is Orientation.VERTICAL:
        return _Axes(1, 0, grid.row_centers, grid.col_centers, grid.x_range[0], grid.cell_w)
    return _Axes(0, 1, grid.col_centers, grid.row_centers, grid.y_range[0], grid.cell_h)


def _segments(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return points[:-1], points[1:]


def _intersections(p: np.ndarray, q: np.ndarray, axis: int, values: np.ndarray):
    """Per line value, the unique point where the polyline meets it, or None.

    Raises LaneEncodeError when the polyline meets a line at two distinct
    points or runs along it.
    """
    a0 = p[:, axis][None, :]
    a1 = q[:, axis][None, :]
    v = np.asarray(values, dtype=np.float64)[:, None]
    lo = np.minimum(a0, a1)
    hi = np.maximum(a0, a1)
    hit = (lo <= v) & (v <= hi)
    flat = a0 == a1
    if np.any(hit & flat):
        raise LaneEncodeError("lane runs along a grid line")
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(hit, (v - a0) / np.where(flat, 1.0, a1 - a0), 0.0)
    out: list[np.ndarray | None] = []
    for li in range(len(values)):
        segs = np.nonzero(hit[li])[0]
        if len(segs) == 0:
            out.append(None)
            continue
        pts = p[segs] + t[li, segs, None] * (q[segs] - p[segs])
        pts[:, axis] = values[li]
        first = pts[0]
        if len(pts) > 1 and np.max(np.abs(pts[1:] - first)) > _DEDUP_TOL:
            raise LaneEncodeError(f"lane crosses the line {values[li]:.3f} more than once")
        out.append(first)
    return out


def resample_lane(lane: Lane3D, axis_values, axis: str = "y") -> list[np.ndarray | None]:
    """Linearly interpolate the lane at each value of ``axis`` ('x' or 'y')."""
    vals = np.asarray(axis_values, dtype=np.float64)
    if len(vals) > 1 and np.any(np.diff(vals) <= 0):
        raise ValueError("axis values must be strictly increasing")
    if axis not in ("x", "y"):
        raise ValueError("axis must be 'x' or 'y'")
    p, q = _segments(lane.points)
    return _intersections(p, q, 0 if axis == "x" else 1, vals)


def clip_to_grid(lane: Lane3D, grid: BevGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Liang-Barsky clip of every segment to the grid rectangle.

    Returns the surviving segment endpoints ``(p [k,3], q [k,3])``.
    """
    p, q = _segments(lane.points)
    d = q - p
    t0 = np.zeros(len(p))
    t1 = np.ones(len(p))
    keep = np.ones(len(p), dtype=bool)
    bounds = ((0, grid.x_range[0], grid.x_range[1]), (1, grid.y_range[0], grid.y_range[1]))
    for axis, lo, hi in bounds:
        for pk, qk in ((-d[:, axis], p[:, axis] - lo), (d[:, axis], hi - p[:, axis])):
            parallel = pk == 0
            keep &= ~(parallel & (qk < 0))
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(parallel, 0.0, qk / np.where(parallel, 1.0, pk))
            entering = (pk < 0) & ~parallel
            leaving = (pk > 0) & ~parallel
            t0 = np.where(entering, np.maximum(t0, r), t0)
            t1 = np.where(leaving, np.minimum(t1, r), t1)
    keep &= t0 <= t1
    cp = p[keep] + t0[keep, None] * d[keep]
    cq = p[keep] + t1[keep, None] * d[keep]
    return cp, cq


def _crossed(cp: np.ndarray, cq: np.ndarray, axis: int, lines: np.ndarray) -> np.ndarray:
    if len(cp) == 0:
        return np.zeros(len(lines), dtype=bool)
    lo = np.minimum(cp[:, axis], cq[:, axis])[None, :]
    hi = np.maximum(cp[:, axis], cq[:, axis])[None, :]
    v = lines[:, None]
    return np.any((lo <= v) & (v <= hi), axis=1)


def crossed_counts(lane: Lane3D, grid: BevGridSpec) -> tuple[int, int]:
    """(row center-lines crossed, column center-lines crossed) inside the grid."""
    cp, cq = clip_to_grid(lane, grid)
    n_vert = int(_crossed(cp, cq, 1, grid.row_centers).sum())
    n_horiz = int(_crossed(cp, cq, 0, grid.col_centers).sum())
    return n_vert, n_horiz


def orientation_from_counts(n_vert: int, n_horiz: int) -> Orientation:
    return Orientation.VERTICAL if n_vert >= n_horiz else Orientation.HORIZONTAL


def classify_orientation(lane: Lane3D, grid: BevGridSpec) -> Orientation:
    n_vert, n_horiz = crossed_counts(lane, grid)
    if n_vert == 0 and n_horiz == 0:
        raise LaneEncodeError("lane crosses no grid line")
    return orientation_from_counts(n_vert, n_horiz)


def encode(lane: Lane3D, grid: BevGridSpec, G: int,
           orientation: Orientation | None = None) -> LaneTargets:
    """Row-wise targets of ``lane`` in ``orientation`` (its own by default)."""
    if not 0 <= lane.category < G:
        raise LaneEncodeError(f"category {lane.category} outside [0, {G})")
    if orientation is None:
        orientation = classify_orientation(lane, grid)
    ax = orientation_axes(grid, orientation)
    cp, cq = clip_to_grid(lane, grid)
    H = len(ax.lines)
    vis = np.zeros(H, dtype=np.int64)
    row_idx = np.full(H, -1, dtype=np.int64)
    off_lat = np.zeros(H)
    off_z = np.zeros(H)
    if len(cp):
        pts = _intersections(cp, cq, ax.line_axis, ax.lines)
        n_classes = len(ax.class_centers)
        for h, pt in enumerate(pts):
            if pt is None:
                continue
            coord = pt[ax.class_axis]
            idx = int(np.clip(np.floor((coord - ax.class_lo) / ax.cell), 0, n_classes - 1))
            vis[h] = 1
            row_idx[h] = idx
            off_lat[h] = coord - ax.class_centers[idx]
            off_z[h] = pt[2]
    if not vis.any():
        raise LaneEncodeError(f"lane crosses no {orientation.value} grid line")
    return LaneTargets(orientation, 1, vis, row_idx, off_lat, off_z, lane.category)


def decode(slot: SlotOutputs, grid: BevGridSpec, exist_thr: float = 0.5,
           vis_thr: float = 0.5) -> Lane3D | None:
    """Turn one slot's outputs into a lane, or None when it is not confident."""
    if slot.exist < exist_thr:
        return None
    ax = orientation_axes(grid, slot.orientation)
    H = len(ax.lines)
    if slot.row_probs.shape != (H, len(ax.class_centers)):
        raise ValueError(f"row_probs shape {slot.row_probs.shape} inconsistent with grid")
    rows = np.nonzero(np.asarray(slot.vis) >= vis_thr)[0]
    if len(rows) < 2:
        return None
    idx = np.argmax(slot.row_probs[rows], axis=1)
    pts = np.empty((len(rows), 3))
    pts[:, ax.class_axis] = ax.class_centers[idx] + slot.off_lat[rows]
    pts[:, ax.line_axis] = ax.lines[rows]
    pts[:, 2] = slot.off_z[rows]
    category = int(np.argmax(slot.category_probs))
    return Lane3D(pts, category, score=float(slot.exist))
