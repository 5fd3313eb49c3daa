"""Lane-level evaluation: F1, category accuracy, near/far errors, chamfer distance.

All reductions use ``math.fsum`` so reports do not depend on scene or lane
order.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import Lane3D, LaneEncodeError, resample_lane
from .matching import hungarian

UNMATCHED_COST = 1e6


@dataclass(frozen=True)
class EvalConfig:
    point_distance_threshold: float = 1.5
    match_fraction: float = 0.75
    near_range: tuple[float, float] = (3.0, 40.0)
    far_range: tuple[float, float] = (40.0, 100.0)
    sample_spacing: float = 1.0

    def __post_init__(self):
        if self.point_distance_threshold <= 0 or self.sample_spacing <= 0:
            raise ValueError("thresholds must be positive")
        if not 0 < self.match_fraction <= 1:
            raise ValueError("match_fraction must lie in (0, 1]")
        if not (self.near_range[0] < self.near_range[1] <= self.far_range[0] < self.far_range[1]):
            raise ValueError("near and far ranges must be ordered and disjoint")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["near_range"] = list(self.near_range)
        d["far_range"] = list(self.far_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("near_range", "far_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class PairError:
    matched: bool
    axis: str
    samples: np.ndarray  # gt points at the sample lines [n, 3]
    covered: np.ndarray  # [n] bool, pred defined at the sample line
    lateral: np.ndarray  # [n] |d lateral|, nan where uncovered
    dz: np.ndarray  # [n] |d z|, nan where uncovered

    @property
    def distances(self) -> np.ndarray:
        return np.hypot(self.lateral, self.dz)

    @property
    def mean_distance(self) -> float:
        d = self.distances[self.covered]
        return math.fsum(d) / len(d) if len(d) else math.inf


def lane_axis(lane: Lane3D) -> str:
    """'y' when the lane extends further longitudinally than laterally."""
    ext = np.ptp(lane.points, axis=0)
    return "y" if ext[1] >= ext[0] else "x"


def _sample_values(lo: float, hi: float, spacing: float) -> np.ndarray:
    vals = np.arange(math.ceil(lo / spacing) * spacing, hi + 1e-9, spacing)
    vals = vals[(vals >= lo) & (vals <= hi)]
    return vals if len(vals) else np.array([(lo + hi) / 2.0])


def _safe_resample(lane: Lane3D, values: np.ndarray, axis: str):
    try:
        return resample_lane(lane, values, axis)
    except LaneEncodeError:
        return [None] * len(values)


def lane_pair_error(pred: Lane3D, gt: Lane3D, cfg: EvalConfig = EvalConfig()) -> PairError:
    axis = lane_axis(gt)
    a = 1 if axis == "y" else 0
    lat = 1 - a
    vals = _sample_values(gt.points[:, a].min(), gt.points[:, a].max(), cfg.sample_spacing)
    g = _safe_resample(gt, vals, axis)
    keep = [i for i, p in enumerate(g) if p is not None]
    if not keep:
        raise ValueError("degenerate ground-truth lane")
    vals = vals[keep]
    gpts = np.array([g[i] for i in keep])
    p = _safe_resample(pred, vals, axis)
    covered = np.array([q is not None for q in p])
    ppts = np.array([q if q is not None else (np.nan, np.nan, np.nan) for q in p])
    d_lat = np.abs(ppts[:, lat] - gpts[:, lat])
    d_z = np.abs(ppts[:, 2] - gpts[:, 2])
    dist = np.hypot(d_lat, d_z)
    close = covered & (np.nan_to_num(dist, nan=np.inf) <= cfg.point_distance_threshold)
    matched = bool(close.sum() >= cfg.match_fraction * len(vals))
    return PairError(matched, axis, gpts, covered, d_lat, d_z)


def densify(lane: Lane3D, spacing: float) -> np.ndarray:
    """Points every ``spacing`` meters of arc length, endpoints included."""
    pts = lane.points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(int(math.ceil(s[-1] / spacing)), 1)
    t = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(t, s, pts[:, k]) for k in range(3)], axis=1)


def chamfer_distance(a: Lane3D, b: Lane3D, spacing: float = 0.5) -> float:
    """Symmetric mean nearest-point distance between two polylines."""
    pa, pb = densify(a, spacing), densify(b, spacing)
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    return 0.5 * (math.fsum(d.min(axis=1)) / len(pa) + math.fsum(d.min(axis=0)) / len(pb))


@dataclass
class EvalReport:
    f1: float
    precision: float
    recall: float
    category_accuracy: float
    x_err_near: float
    x_err_far: float
    z_err_near: float
    z_err_far: float
    cd_error: float
    tp: int
    fp: int
    fn: int
    notes: dict = field(default_factory=lambda: {
        "category_accuracy": "fraction of matched pairs with the correct category",
        "errors": "mean over matched pairs of per-pair mean absolute error; 0 when no pairs",
        "x_err": "lateral error (x for vertical lanes, y for horizontal lanes)",
    })

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _div(num: float, den: float) -> float:
    return num / den if den else 0.0


def _match_scene(preds: list[Lane3D], gts: list[Lane3D], cfg: EvalConfig):
    """Matched (gt, pred, PairError) triples of one scene."""
    if not preds or not gts:
        return []
    errs = [[lane_pair_error(p, g, cfg) for p in preds] for g in gts]
    cost = np.array([[e.mean_distance if e.matched else UNMATCHED_COST for e in row] for row in errs])
    if len(gts) <= len(preds):
        pairs = [(gi, int(pi)) for gi, pi in enumerate(hungarian(cost))]
    else:
        pairs = [(int(gi), pi) for pi, gi in enumerate(hungarian(cost.T))]
    return [(gi, pi, errs[gi][pi]) for gi, pi in sorted(pairs) if errs[gi][pi].matched]


def _range_mean(values: np.ndarray, coord: np.ndarray, lo: float, hi: float, lo_open: bool):
    sel = (coord > lo if lo_open else coord >= lo) & (coord <= hi) & ~np.isnan(values)
    v = values[sel]
    return math.fsum(v) / len(v) if len(v) else None


def evaluate(preds: list[list[Lane3D]], gts: list[list[Lane3D]],
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction scenes vs {len(gts)} ground-truth scenes")
    tp = fp = fn = 0
    correct = 0
    buckets: dict[str, list[float]] = {k: [] for k in ("xn", "xf", "zn", "zf", "cd")}
    for p_scene, g_scene in zip(preds, gts):
        matches = _match_scene(p_scene, g_scene, cfg)
        tp += len(matches)
        fp += len(p_scene) - len(matches)
        fn += len(g_scene) - len(matches)
        for gi, pi, err in matches:
            gt, pred = g_scene[gi], p_scene[pi]
            correct += int(gt.category == pred.category)
            y = err.samples[:, 1]
            for key, values in (("x", err.lateral), ("z", err.dz)):
                near = _range_mean(values, y, *cfg.near_range, lo_open=False)
                far = _range_mean(values, y, *cfg.far_range, lo_open=True)
                if near is not None:
                    buckets[key + "n"].append(near)
                if far is not None:
                    buckets[key + "f"].append(far)
            buckets["cd"].append(chamfer_distance(pred, gt, cfg.sample_spacing / 2.0))
    precision = _div(tp, tp + fp)
    recall = _div(tp, tp + fn)
    f1 = _div(2 * precision * recall, precision + recall)

    def mean(key):
        vals = sorted(buckets[key])
        return _div(math.fsum(vals), len(vals))

    return EvalReport(f1, precision, recall, _div(correct, tp), mean("xn"), mean("xf"),
                      mean("zn"), mean("zf"), mean("cd"), tp, fp, fn)
