"""Label assignment (Hungarian + single-win matching) and the training losses."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .codec import (
    Lane3D,
    LaneEncodeError,
    LaneTargets,
    Orientation,
    SlotOutputs,
    crossed_counts,
    encode,
    orientation_axes,
    orientation_from_counts,
)
from .geometry import BevGridSpec
from .tensor import LOG_EPS, Tensor, clamp, concat, log, log_sigmoid, tabs

PROB_LO = LOG_EPS
PROB_HI = 1.0 - LOG_EPS
UNENCODABLE_COST = 1e6

V, H = Orientation.VERTICAL, Orientation.HORIZONTAL


# -- Hungarian -----------------------------------------------------------------

def _solve_sub(cost: np.ndarray, rows: list[int], cols: list[int]) -> tuple[float, list[int]]:
    if not rows:
        return 0.0, []
    sub = cost[np.ix_(rows, cols)]
    a = kernels.solve_lap(sub)
    return float(sub[np.arange(len(rows)), a].sum()), [cols[j] for j in a]


def hungarian(cost) -> np.ndarray:
    """Minimum-cost injective map rows -> columns of an M x N matrix, M <= N.

    Among optimal assignments the lexicographically smallest (by the column
    of row 0, then row 1, ...) is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    M, N = cost.shape
    if M > N:
        raise ValueError(f"more labels than slots ({M} > {N})")
    if M == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.isfinite(cost).all():
        raise ValueError("costs must be finite")
    current = [int(j) for j in kernels.solve_lap(cost)]
    opt = float(cost[np.arange(M), current].sum())
    tol = 1e-12 * max(1.0, abs(opt), float(np.abs(cost).max()))

    # Keep an optimal completion of the fixed prefix; row i only needs to try
    # columns smaller than the completion's choice.
    fixed_total = 0.0
    free = list(range(N))
    for i in range(M):
        rest = list(range(i + 1, M))
        for j in free:
            if j >= current[i]:
                break
            sub_total, completion = _solve_sub(cost, rest, [c for c in free if c != j])
            if fixed_total + cost[i, j] + sub_total <= opt + tol:
                current[i:] = [j] + completion
                break
        fixed_total += cost[i, current[i]]
        free.remove(current[i])
    return np.array(current, dtype=np.int64)


def assignment_total(cost, assignment) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(cost[np.arange(len(assignment)), assignment].sum())


# -- label encoding --------------------------------------------------------------

@dataclass
class LabelEncoding:
    lane: Lane3D
    counts: tuple[int, int]  # (vertical lines crossed, horizontal lines crossed)
    targets: dict[Orientation, LaneTargets | None]

    @property
    def winner(self) -> Orientation:
        return orientation_from_counts(*self.counts)


def encode_labels(labels: list[Lane3D], grid: BevGridSpec, G: int) -> list[LabelEncoding]:
    out = []
    for lane in labels:
        counts = crossed_counts(lane, grid)
        if counts == (0, 0):
            raise LaneEncodeError("label crosses no grid line")
        targets: dict[Orientation, LaneTargets | None] = {}
        for o in (V, H):
            try:
                targets[o] = encode(lane, grid, G, o)
            except LaneEncodeError:
                targets[o] = None
        if targets[orientation_from_counts(*counts)] is None:
            raise LaneEncodeError("label cannot be encoded in its own orientation")
        out.append(LabelEncoding(lane, counts, targets))
    return out


# -- pair costs --------------------------------------------------------------------

def _bce(p, t):
    p = np.clip(p, PROB_LO, PROB_HI)
    return -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))


def cost_matrix(arrays: dict[str, np.ndarray], targets: list[LaneTargets | None]) -> np.ndarray:
    """Label x slot matching costs for one scene of one head group.

    ``arrays`` holds one scene's head outputs: exist [N], vis [N,H], row
    [N,H,W], category [N,G], off_lat [N,H], off_z [N,H].
    """
    e = np.asarray(arrays["exist"], dtype=np.float64)
    vis = np.asarray(arrays["vis"], dtype=np.float64)
    row = np.asarray(arrays["row"], dtype=np.float64)
    cat = np.asarray(arrays["category"], dtype=np.float64)
    lat = np.asarray(arrays["off_lat"], dtype=np.float64)
    z = np.asarray(arrays["off_z"], dtype=np.float64)
    N, Hn = vis.shape
    cost = np.empty((len(targets), N))
    c_exist = -np.log(np.clip(e, PROB_LO, PROB_HI))
    for k, t in enumerate(targets):
        if t is None:
            cost[k] = UNENCODABLE_COST
            continue
        m = t.vis.astype(bool)
        hv = np.nonzero(m)[0]
        c_vis = _bce(vis, t.vis[None, :].astype(np.float64)).sum(axis=1) / Hn
        c_row = -np.log(np.clip(row[:, hv, t.row_idx[hv]], PROB_LO, PROB_HI)).sum(axis=1)
        c_cat = -np.log(np.clip(cat[:, t.category], PROB_LO, PROB_HI))
        c_off = (np.abs(lat[:, hv] - t.off_lat[hv]) + np.abs(z[:, hv] - t.off_z[hv])).sum(axis=1)
        cost[k] = c_exist + c_vis + c_row + c_cat + c_off
    return cost


def _slot_arrays(slot: SlotOutputs) -> dict[str, np.ndarray]:
    return {
        "exist": np.array([slot.exist]),
        "vis": slot.vis[None],
        "row": slot.row_probs[None],
        "category": slot.category_probs[None],
        "off_lat": slot.off_lat[None],
        "off_z": slot.off_z[None],
    }


def pair_cost(slot: SlotOutputs, targets: LaneTargets) -> float:
    """Cost of supervising ``slot`` with ``targets``: the five losses at N_l = 1."""
    if slot.orientation is not targets.orientation:
        raise ValueError("slot and targets have different orientations")
    return float(cost_matrix(_slot_arrays(slot), [targets])[0, 0])


# -- matching ------------------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    label: int
    orientation: Orientation
    slot: int


@dataclass
class SceneMatch:
    assignments: list[Assignment]
    unmatched: dict[Orientation, list[int]]


@dataclass
class MatchResult:
    scenes: list[SceneMatch] = field(default_factory=list)

    @property
    def n_matched(self) -> int:
        return sum(len(s.assignments) for s in self.scenes)


def _unmatched(assignments: list[Assignment], n_slots: int, orientations) -> dict[Orientation, list[int]]:
    used = {(a.orientation, a.slot) for a in assignments}
    return {o: [n for n in range(n_slots) if (o, n) not in used] for o in orientations}


def som_match(vert: dict[str, np.ndarray], horiz: dict[str, np.ndarray] | None,
              encodings: list[LabelEncoding]) -> SceneMatch:
    """Single-win one-to-one matching for one scene.

    Each head group is Hungarian-matched against every label independently;
    each label then keeps only the slot of the group where it crosses more
    grid lines (ties go to the vertical group).
    """
    N = vert["exist"].shape[0]
    groups = {V: vert} if horiz is None else {V: vert, H: horiz}
    if len(encodings) > N:
        raise ValueError(f"{len(encodings)} labels exceed the {N} slots of a head group")
    chosen: dict[Orientation, np.ndarray] = {}
    for o, arrays in groups.items():
        cost = cost_matrix(arrays, [enc.targets[o] for enc in encodings])
        chosen[o] = hungarian(cost) if encodings else np.zeros(0, dtype=np.int64)
    assignments = []
    for k, enc in enumerate(encodings):
        winner = enc.winner
        if winner not in groups:
            winner = V
        if enc.targets[winner] is None:
            continue
        assignments.append(Assignment(k, winner, int(chosen[winner][k])))
    return SceneMatch(assignments, _unmatched(assignments, N, groups))


def lateral_sort_key(t: LaneTargets, grid: BevGridSpec) -> float:
    """Classified coordinate at the nearest visible line."""
    ax = orientation_axes(grid, t.orientation)
    h = int(np.nonzero(t.vis)[0][0])
    return float(ax.class_centers[t.row_idx[h]] + t.off_lat[h])


def index_match(encodings: list[LabelEncoding], grid: BevGridSpec, n_slots: int,
                horizontal_enabled: bool = True) -> SceneMatch:
    """Baseline: within each orientation, the k-th label from the left takes slot k."""
    groups = (V, H) if horizontal_enabled else (V,)
    per: dict[Orientation, list[int]] = {o: [] for o in groups}
    for k, enc in enumerate(encodings):
        winner = enc.winner if enc.winner in groups else V
        if enc.targets[winner] is None:
            continue
        per[winner].append(k)
    assignments = []
    for o, ks in per.items():
        if len(ks) > n_slots:
            raise ValueError(f"{len(ks)} {o.value} labels exceed {n_slots} slots")
        ordered = sorted(ks, key=lambda k: (lateral_sort_key(encodings[k].targets[o], grid), k))
        assignments.extend(Assignment(k, o, rank) for rank, k in enumerate(ordered))
    assignments.sort(key=lambda a: a.label)
    return SceneMatch(assignments, _unmatched(assignments, n_slots, groups))


def exhaustive_assignment(cost: np.ndarray) -> np.ndarray:
    """Brute-force minimum over all injective maps, lexicographic tie-break."""
    M, N = cost.shape
    best, best_total = None, np.inf
    for perm in itertools.permutations(range(N), M):
        total = float(cost[np.arange(M), list(perm)].sum())
        if total < best_total:
            best, best_total = perm, total
    return np.array(best if best is not None else (), dtype=np.int64)


# -- losses ----------------------------------------------------------------------------

def _const(arr: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(arr, dtype=like.dtype)


def _norm(n_labels: int) -> float:
    return 1.0 / max(int(n_labels), 1)


def bce_sum(p: Tensor, target: np.ndarray, mask: np.ndarray | None = None,
            positive_only: bool = False, logits: Tensor | None = None) -> Tensor:
    """Summed binary cross-entropy of probabilities ``p``.

    With ``logits`` (``p == sigmoid(logits)``) the log terms come from
    ``log_sigmoid`` instead of the clamped log, so a probability that has
    rounded to exactly 0 or 1 still receives a gradient.
    """
    t = np.asarray(target, dtype=p.dtype)
    m = np.ones_like(t) if mask is None else np.asarray(mask, dtype=p.dtype)
    if logits is not None:
        if logits.shape != p.shape:
            raise ValueError(f"logits shape {logits.shape} != probabilities {p.shape}")
        log_p, log_q = log_sigmoid(logits), log_sigmoid(-logits)
    else:
        pc = clamp(p, PROB_LO, PROB_HI)
        log_p, log_q = log(pc), log(1.0 - pc)
    terms = log_p * _const(m * t, p)
    if not positive_only:
        terms = terms + log_q * _const(m * (1.0 - t), p)
    return -terms.sum()


def loss_existence(y_e: Tensor, targets: np.ndarray, n_labels: int,
                   logits: Tensor | None = None) -> Tensor:
    if y_e.shape != np.shape(targets):
        raise ValueError(f"existence shape {y_e.shape} != targets {np.shape(targets)}")
    return bce_sum(y_e, targets, logits=logits) * _norm(n_labels)


def loss_visibility(y_v: Tensor, targets: np.ndarray, slot_mask: np.ndarray, n_labels: int,
                    positive_only: bool = False, logits: Tensor | None = None) -> Tensor:
    """BCE over the lines of matched slots, normalised by ``max(N_l,1) * H``.

    ``y_v`` is ``[B, N, H, 1]``; ``targets`` ``[B, N, H]``; ``slot_mask`` ``[B, N]``.
    """
    B, N, Hn = np.shape(targets)
    if y_v.shape != (B, N, Hn, 1):
        raise ValueError(f"visibility shape {y_v.shape} != {(B, N, Hn, 1)}")
    mask = np.broadcast_to(np.asarray(slot_mask, dtype=np.float64)[:, :, None], (B, N, Hn))
    flat_logits = logits.reshape(B, N, Hn) if logits is not None else None
    return bce_sum(y_v.reshape(B, N, Hn), targets, mask, positive_only,
                   flat_logits) * (_norm(n_labels) / Hn)


def loss_rowindex(y_r: Tensor, onehot: np.ndarray, n_labels: int) -> Tensor:
    """Cross-entropy of the true class per visible line; ``onehot`` is zero elsewhere."""
    if y_r.shape != np.shape(onehot):
        raise ValueError(f"row index shape {y_r.shape} != targets {np.shape(onehot)}")
    return -(log(clamp(y_r, PROB_LO, PROB_HI)) * _const(onehot, y_r)).sum() * _norm(n_labels)


def loss_category(y_c: Tensor, onehot: np.ndarray, n_labels: int) -> Tensor:
    if y_c.shape != np.shape(onehot):
        raise ValueError(f"category shape {y_c.shape} != targets {np.shape(onehot)}")
    return -(log(clamp(y_c, PROB_LO, PROB_HI)) * _const(onehot, y_c)).sum() * _norm(n_labels)


def loss_offsets(y_lat: Tensor, y_z: Tensor, t_lat: np.ndarray, t_z: np.ndarray,
                 vis_mask: np.ndarray, n_labels: int) -> Tensor:
    """Visibility-masked L1 on both offsets. Predictions are ``[B, N, H, 1]``."""
    shape = np.shape(vis_mask)
    if y_lat.shape[:3] != shape or y_z.shape[:3] != shape:
        raise ValueError("offset shapes do not match the visibility mask")
    m = _const(np.asarray(vis_mask, dtype=np.float64), y_lat)
    d_lat = tabs((y_lat.reshape(shape) - _const(t_lat, y_lat)) * m)
    d_z = tabs((y_z.reshape(shape) - _const(t_z, y_z)) * m)
    return (d_lat.sum() + d_z.sum()) * _norm(n_labels)


@dataclass
class GroupTargets:
    exist: np.ndarray  # [B, N]
    slot_mask: np.ndarray  # [B, N]
    vis: np.ndarray  # [B, N, H]
    row_onehot: np.ndarray  # [B, N, H, W]
    cat_onehot: np.ndarray  # [B, N, G]
    off_lat: np.ndarray  # [B, N, H]
    off_z: np.ndarray  # [B, N, H]

    @classmethod
    def empty(cls, B, N, Hn, Wn, G) -> "GroupTargets":
        return cls(np.zeros((B, N)), np.zeros((B, N)), np.zeros((B, N, Hn)),
                   np.zeros((B, N, Hn, Wn)), np.zeros((B, N, G)), np.zeros((B, N, Hn)),
                   np.zeros((B, N, Hn)))


def build_targets(match: MatchResult, encodings: list[list[LabelEncoding]],
                  shapes: dict[Orientation, tuple[int, int, int, int, int]]) -> dict[Orientation, GroupTargets]:
    out = {o: GroupTargets.empty(*shp) for o, shp in shapes.items()}
    for b, scene in enumerate(match.scenes):
        for a in scene.assignments:
            t = encodings[b][a.label].targets[a.orientation]
            g = out[a.orientation]
            n = a.slot
            g.exist[b, n] = 1.0
            g.slot_mask[b, n] = 1.0
            g.vis[b, n] = t.vis
            hv = np.nonzero(t.vis)[0]
            g.row_onehot[b, n, hv, t.row_idx[hv]] = 1.0
            g.cat_onehot[b, n, t.category] = 1.0
            g.off_lat[b, n] = np.where(t.vis > 0, t.off_lat, 0.0)
            g.off_z[b, n] = np.where(t.vis > 0, t.off_z, 0.0)
    return out


@dataclass
class LossBreakdown:
    L_e: float
    L_v: float
    L_r: float
    L_c: float
    L_o: float
    total: float

    def to_dict(self) -> dict:
        return {"L_e": self.L_e, "L_v": self.L_v, "L_r": self.L_r, "L_c": self.L_c,
                "L_o": self.L_o, "total": self.total}


def match_batch(vert, horiz, encodings: list[list[LabelEncoding]], grid: BevGridSpec,
                matcher: str = "som") -> MatchResult:
    va = vert.arrays()
    ha = horiz.arrays() if horiz is not None else None
    result = MatchResult()
    N = vert.n_slots
    for b, encs in enumerate(encodings):
        if matcher == "som":
            vb = {k: v[b] for k, v in va.items()}
            hb = {k: v[b] for k, v in ha.items()} if ha is not None else None
            result.scenes.append(som_match(vb, hb, encs))
        elif matcher == "index":
            result.scenes.append(index_match(encs, grid, N, horizontal_enabled=horiz is not None))
        else:
            raise ValueError(f"unknown matcher {matcher!r}")
    return result


def total_loss(vert, horiz, encodings: list[list[LabelEncoding]], grid: BevGridSpec,
               matcher: str = "som", match: MatchResult | None = None,
               weights: dict[str, float] | None = None, vis_positive_only: bool = False):
    """Match, build targets and sum the five losses.

    Returns ``(total Tensor, LossBreakdown, MatchResult)``. Pass ``match`` to
    reuse a fixed assignment (gradient checks need the matching frozen).
    """
    if match is None:
        match = match_batch(vert, horiz, encodings, grid, matcher)
    groups = {V: vert} if horiz is None else {V: vert, H: horiz}
    shapes = {o: out.row.shape[:2] + out.row.shape[2:] + (out.category.shape[2],)
              for o, out in groups.items()}
    targets = build_targets(match, encodings, shapes)
    n_l = match.n_matched
    w = {"e": 1.0, "v": 1.0, "r": 1.0, "c": 1.0, "o": 1.0, **(weights or {})}

    exist_pred = concat([groups[o].exist for o in groups], axis=1)
    exist_tgt = np.concatenate([targets[o].exist for o in groups], axis=1)
    exist_logit = None
    if all(out.exist_logit is not None for out in groups.values()):
        exist_logit = concat([groups[o].exist_logit for o in groups], axis=1)
    L_e = loss_existence(exist_pred, exist_tgt, n_l, exist_logit)
    parts = {"v": [], "r": [], "c": [], "o": []}
    for o, out in groups.items():
        t = targets[o]
        parts["v"].append(loss_visibility(out.vis, t.vis, t.slot_mask, n_l, vis_positive_only,
                                          out.vis_logit))
        parts["r"].append(loss_rowindex(out.row, t.row_onehot, n_l))
        parts["c"].append(loss_category(out.category, t.cat_onehot, n_l))
        vmask = t.vis * t.slot_mask[:, :, None]
        parts["o"].append(loss_offsets(out.off_lat, out.off_z, t.off_lat, t.off_z, vmask, n_l))
    L = {"e": L_e}
    for k, terms in parts.items():
        acc = terms[0]
        for extra in terms[1:]:
            acc = acc + extra
        L[k] = acc
    total = L["e"] * w["e"]
    for k in ("v", "r", "c", "o"):
        total = total + L[k] * w[k]
    vals = {k: float(v.data) for k, v in L.items()}
    breakdown = LossBreakdown(vals["e"], vals["v"], vals["r"], vals["c"], vals["o"],
                              float(sum(vals[k] * w[k] for k in "evrco")))
    return total, breakdown, match
