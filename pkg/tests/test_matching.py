import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from grouplane.codec import Lane3D, LaneEncodeError, Orientation, SlotOutputs, encode
from grouplane.geometry import BevGridSpec
from grouplane.matching import (
    encode_labels,
    cost_matrix,
    exhaustive_assignment,
    hungarian,
    index_match,
    loss_category,
    loss_existence,
    loss_offsets,
    loss_rowindex,
    loss_visibility,
    pair_cost,
    som_match,
    total_loss,
)
from grouplane.network import HeadOutputs
from grouplane.tensor import Tensor

V, H = Orientation.VERTICAL, Orientation.HORIZONTAL
GRID = BevGridSpec()
G = 4


def t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def straight(x, category=0, y=(3.0, 103.0)):
    return Lane3D(np.array([[x, y[0], 0.1], [x, y[1], 0.1]]), category)


def crosswalk(y, category=1):
    return Lane3D(np.array([[-10.0, y, 0.0], [10.0, y, 0.0]]), category)


def diagonal(seed):
    """Short lane that encodes in both orientations."""
    rng = np.random.default_rng(seed)
    x0, y0 = rng.uniform(-8, 4), rng.uniform(5, 60)
    dx, dy = rng.uniform(1.5, 4), rng.uniform(10, 30)
    return Lane3D(np.array([[x0, y0, 0.0], [x0 + dx, y0 + dy, 0.2]]), int(rng.integers(G)))


def random_slots(rng, N, orientation):
    lines, classes = (GRID.rows, GRID.cols) if orientation is V else (GRID.cols, GRID.rows)
    row = rng.dirichlet(np.ones(classes), size=(N, lines))
    return {
        "exist": rng.uniform(0.05, 0.95, N),
        "vis": rng.uniform(0.05, 0.95, (N, lines)),
        "row": row,
        "category": rng.dirichlet(np.ones(G), size=N),
        "off_lat": rng.normal(0, 0.2, (N, lines)),
        "off_z": rng.normal(0, 0.2, (N, lines)),
    }


def perfect_slots(targets, N, orientation):
    """Slot k reproduces targets[k]; the rest are confident negatives."""
    lines, classes = (GRID.rows, GRID.cols) if orientation is V else (GRID.cols, GRID.rows)
    a = {
        "exist": np.zeros(N), "vis": np.zeros((N, lines)),
        "row": np.full((N, lines, classes), 1.0 / classes),
        "category": np.full((N, G), 1.0 / G),
        "off_lat": np.zeros((N, lines)), "off_z": np.zeros((N, lines)),
    }
    for k, tg in enumerate(targets):
        s = SlotOutputs.from_targets(tg, classes, G)
        a["exist"][k] = s.exist
        a["vis"][k], a["row"][k], a["category"][k] = s.vis, s.row_probs, s.category_probs
        a["off_lat"][k], a["off_z"][k] = s.off_lat, s.off_z
    return a


def head_outputs(orientation, arrays):
    """Batch of one scene as HeadOutputs tensors."""
    return HeadOutputs(
        orientation, t(arrays["exist"][None]), t(arrays["vis"][None, ..., None]),
        t(arrays["row"][None]), t(arrays["category"][None]),
        t(arrays["off_lat"][None, ..., None]), t(arrays["off_z"][None, ..., None]),
    )


class TestHungarian:
    def test_examples(self):
        assert hungarian([[1, 2], [2, 1]]).tolist() == [0, 1]
        c = np.ones((4, 4)) - np.eye(4)
        assert hungarian(c).tolist() == [0, 1, 2, 3]

    def test_lexicographic_tie_break(self):
        assert hungarian(np.zeros((2, 3))).tolist() == [0, 1]
        assert hungarian([[1, 1], [1, 1]]).tolist() == [0, 1]

    def test_errors(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            hungarian([[np.inf, 0.0]])

    def test_empty(self):
        assert hungarian(np.zeros((0, 4))).tolist() == []

    def test_random_6x6_against_permutations(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            c = rng.uniform(0, 10, (6, 6))
            best = min(sum(c[i, p[i]] for i in range(6)) for p in itertools.permutations(range(6)))
            a = hungarian(c)
            assert abs(c[np.arange(6), a].sum() - best) <= 1e-9

    @given(st.integers(1, 7), st.integers(0, 3), st.integers(0, 10**6), st.booleans())
    @settings(max_examples=40)
    def test_matches_brute_force(self, m, extra, seed, integer):
        n = min(7, m + extra)
        rng = np.random.default_rng(seed)
        # small integer costs force many ties, exercising the tie-break
        c = rng.integers(0, 3, (m, n)).astype(float) if integer else rng.uniform(0, 5, (m, n))
        assert hungarian(c).tolist() == exhaustive_assignment(c).tolist()

    @given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, scale):
        c = np.random.default_rng(seed).uniform(0, 1, (4, 5))
        assert hungarian(c).tolist() == hungarian(c * scale).tolist()


class TestLossClosedForms:
    def test_existence(self):
        assert loss_existence(t([[0.5]]), np.array([[1.0]]), 1).item() == pytest.approx(math.log(2), abs=1e-12)
        assert loss_existence(t([[0.5, 0.5]]), np.array([[1.0, 0.0]]), 1).item() == pytest.approx(2 * math.log(2), abs=1e-12)
        assert loss_existence(t([[1.0, 0.0]]), np.array([[1.0, 0.0]]), 1).item() <= 1e-10

    def test_visibility(self):
        L = loss_visibility(t(np.full((1, 1, 1, 1), 0.5)), np.ones((1, 1, 1)), np.ones((1, 1)), 1)
        assert L.item() == pytest.approx(math.log(2), abs=1e-12)
        L = loss_visibility(t(np.zeros((1, 1, 5, 1))), np.zeros((1, 1, 5)), np.ones((1, 1)), 1)
        assert L.item() <= 1e-10

    def test_visibility_positive_only(self):
        L = loss_visibility(t(np.full((1, 1, 2, 1), 0.5)), np.array([[[1.0, 0.0]]]), np.ones((1, 1)), 1,
                            positive_only=True)
        assert L.item() == pytest.approx(math.log(2) / 2, abs=1e-12)

    def test_rowindex(self):
        onehot = np.zeros((1, 1, 2, 4))
        onehot[0, 0, 0, 2] = 1.0
        L = loss_rowindex(t(np.full((1, 1, 2, 4), 0.25)), onehot, 1)
        assert L.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_category(self):
        onehot = np.zeros((1, 1, 4))
        onehot[0, 0, 1] = 1.0
        assert loss_category(t(np.full((1, 1, 4), 0.25)), onehot, 1).item() == pytest.approx(math.log(4), abs=1e-12)
        two = np.zeros((1, 2, 2))
        two[0, 0, 0] = two[0, 1, 1] = 1.0
        assert loss_category(t(np.full((1, 2, 2), 0.5)), two, 2).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_offsets(self):
        L = loss_offsets(t([[[[0.3]]]]), t([[[[0.5]]]]), np.array([[[0.1]]]), np.array([[[0.5]]]),
                         np.ones((1, 1, 1)), 1)
        assert L.item() == pytest.approx(0.2, abs=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            loss_existence(t([[0.5, 0.5]]), np.ones((1, 3)), 1)
        with pytest.raises(ValueError):
            loss_rowindex(t(np.full((1, 1, 2, 4), 0.25)), np.zeros((1, 1, 2, 3)), 1)
        with pytest.raises(ValueError):
            loss_category(t(np.full((1, 1, 4), 0.25)), np.zeros((1, 1, 3)), 1)

    @given(st.integers(0, 10**6))
    def test_masking_contract(self, seed):
        rng = np.random.default_rng(seed)
        vis = (rng.uniform(size=(2, 3, 5)) < 0.5).astype(float)
        onehot = np.zeros((2, 3, 5, 4))
        idx = rng.integers(0, 4, (2, 3, 5))
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        onehot *= vis[..., None]
        probs = rng.dirichlet(np.ones(4), size=(2, 3, 5))
        lat, z = rng.normal(size=(2, 3, 5, 1)), rng.normal(size=(2, 3, 5, 1))
        tl, tz = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5))
        hidden = vis == 0
        probs2, lat2, z2 = probs.copy(), lat.copy(), z.copy()
        probs2[hidden] = rng.dirichlet(np.ones(4), size=int(hidden.sum()))
        lat2[hidden] = rng.normal(size=(int(hidden.sum()), 1))
        z2[hidden] = rng.normal(size=(int(hidden.sum()), 1))
        assert loss_rowindex(t(probs), onehot, 3).item() == loss_rowindex(t(probs2), onehot, 3).item()
        assert (loss_offsets(t(lat), t(z), tl, tz, vis, 3).item()
                == loss_offsets(t(lat2), t(z2), tl, tz, vis, 3).item())

    @given(st.integers(0, 10**6))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(size=(2, 3))
        assert loss_existence(t(p), (rng.uniform(size=(2, 3)) < 0.5).astype(float), 0).item() >= 0


class TestPairCost:
    def test_perfect_slot(self):
        tg = encode(straight(0.3), GRID, G)
        assert 0 <= pair_cost(SlotOutputs.from_targets(tg, GRID.cols, G), tg) <= 1e-9

    def test_monotone_in_lateral_error(self):
        tg = encode(straight(0.3), GRID, G)
        costs = []
        for err in (0.05, 0.1, 0.15):
            s = SlotOutputs.from_targets(tg, GRID.cols, G)
            s.off_lat = s.off_lat + err
            costs.append(pair_cost(s, tg))
        assert costs[0] < costs[1] < costs[2]

    def test_orientation_mismatch(self):
        tg = encode(straight(0.3), GRID, G)
        s = SlotOutputs.from_targets(tg, GRID.cols, G)
        s.orientation = H
        with pytest.raises(ValueError):
            pair_cost(s, tg)


class TestSom:
    def test_vertical_label_goes_to_vertical_group(self, rng):
        (enc,) = encode_labels([straight(1.0, y=(10.0, 30.0))], GRID, G)
        assert enc.counts[0] > enc.counts[1]
        vert, horiz = random_slots(rng, 3, V), random_slots(rng, 3, H)
        m = som_match(vert, horiz, [enc])
        best = int(np.argmin(cost_matrix(vert, [enc.targets[V]])[0]))
        assert [(a.orientation, a.slot) for a in m.assignments] == [(V, best)]
        assert len(m.unmatched[V]) == 2 and len(m.unmatched[H]) == 3

    def test_zero_labels_only_existence(self, rng):
        vert, horiz = random_slots(rng, 3, V), random_slots(rng, 3, H)
        _, br, match = total_loss(head_outputs(V, vert), head_outputs(H, horiz), [[]], GRID)
        assert match.n_matched == 0
        assert br.L_e > 0 and br.L_v == br.L_r == br.L_c == br.L_o == 0.0

    def test_too_many_labels(self, rng):
        encs = encode_labels([straight(x) for x in (-6.0, -2.0, 2.0, 6.0)], GRID, G)
        with pytest.raises(ValueError):
            som_match(random_slots(rng, 3, V), random_slots(rng, 3, H), encs)

    @given(st.integers(0, 10**6))
    @settings(max_examples=25)
    def test_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        lanes = [diagonal(seed * 3 + k) for k in range(3)]
        try:
            encs = encode_labels(lanes, GRID, G)
        except LaneEncodeError:
            assume(False)
        assume(all(e.targets[V] is not None and e.targets[H] is not None for e in encs))
        vert, horiz = random_slots(rng, 4, V), random_slots(rng, 4, H)
        m = som_match(vert, horiz, encs)
        chosen = {o: exhaustive_assignment(cost_matrix(a, [e.targets[o] for e in encs]))
                  for o, a in ((V, vert), (H, horiz))}
        expected = []
        for k, e in enumerate(encs):
            o = V if e.counts[0] >= e.counts[1] else H
            expected.append((k, o, int(chosen[o][k])))
        assert [(a.label, a.orientation, a.slot) for a in m.assignments] == expected
        # invariants: each label once, each slot at most once
        used = [(a.orientation, a.slot) for a in m.assignments]
        assert len(set(used)) == len(used)
        for o in (V, H):
            assert set(m.unmatched[o]) == set(range(4)) - {s for oo, s in used if oo is o}


class TestIndexMatch:
    def test_single_label(self):
        m = index_match(encode_labels([straight(4.0)], GRID, G), GRID, 3)
        assert [(a.label, a.orientation, a.slot) for a in m.assignments] == [(0, V, 0)]

    def test_lateral_order(self):
        a = index_match(encode_labels([straight(-3.0), straight(3.0)], GRID, G), GRID, 3)
        b = index_match(encode_labels([straight(3.0), straight(-3.0)], GRID, G), GRID, 3)
        assert [x.slot for x in a.assignments] == [0, 1]
        assert [x.slot for x in b.assignments] == [1, 0]

    def test_overflow(self):
        with pytest.raises(ValueError):
            index_match(encode_labels([straight(x) for x in (-6.0, 0.0, 6.0)], GRID, G), GRID, 2)

    def test_agrees_with_som_on_preordered_slots(self):
        lanes = [straight(4.0, 1), crosswalk(20.3, 2), straight(-5.0, 3)]
        encs = encode_labels(lanes, GRID, G)
        idx = index_match(encs, GRID, 3)
        vt = [encs[2].targets[V], encs[0].targets[V]]
        ht = [encs[1].targets[H]]
        som = som_match(perfect_slots(vt, 3, V), perfect_slots(ht, 3, H), encs)
        key = lambda m: sorted((a.label, a.orientation.value, a.slot) for a in m.assignments)
        assert key(idx) == key(som)


class TestTotalLoss:
    def lanes(self):
        return [straight(4.0, 1), crosswalk(20.3, 2), straight(-5.0, 3)]

    def test_perfect_fixture(self):
        encs = encode_labels(self.lanes(), GRID, G)
        vert = perfect_slots([encs[0].targets[V], encs[2].targets[V]], 3, V)
        horiz = perfect_slots([encs[1].targets[H]], 3, H)
        total, br, m = total_loss(head_outputs(V, vert), head_outputs(H, horiz), [encs], GRID)
        assert m.n_matched == 3
        assert 0 <= total.item() <= 1e-10

    def test_breakdown_sums(self, rng):
        encs = encode_labels(self.lanes(), GRID, G)
        vert, horiz = random_slots(rng, 3, V), random_slots(rng, 3, H)
        total, br, _ = total_loss(head_outputs(V, vert), head_outputs(H, horiz), [encs], GRID)
        assert abs(br.total - (br.L_e + br.L_v + br.L_r + br.L_c + br.L_o)) <= 1e-12
        assert abs(br.total - total.item()) <= 1e-9
        assert min(br.L_e, br.L_v, br.L_r, br.L_c, br.L_o) >= 0

    def test_batch_permutation(self, rng):
        e1 = encode_labels(self.lanes(), GRID, G)
        e2 = encode_labels([straight(1.0)], GRID, G)
        s = [(random_slots(rng, 3, V), random_slots(rng, 3, H)) for _ in range(2)]

        def batch(order):
            cat = lambda o, i: {k: np.stack([s[j][i][k] for j in order]) for k in s[0][i]}
            v, h = cat(V, 0), cat(H, 1)
            mk = lambda o, a: HeadOutputs(o, t(a["exist"]), t(a["vis"][..., None]), t(a["row"]),
                                          t(a["category"]), t(a["off_lat"][..., None]),
                                          t(a["off_z"][..., None]))
            encs = [e1, e2] if order == [0, 1] else [e2, e1]
            return total_loss(mk(V, v), mk(H, h), encs, GRID)[1].total

        assert batch([0, 1]) == pytest.approx(batch([1, 0]), abs=1e-12)

    def test_index_matcher(self, rng):
        encs = encode_labels(self.lanes(), GRID, G)
        vert, horiz = random_slots(rng, 3, V), random_slots(rng, 3, H)
        _, _, m = total_loss(head_outputs(V, vert), head_outputs(H, horiz), [encs], GRID, matcher="index")
        assert sorted((a.label, a.slot) for a in m.scenes[0].assignments) == [(0, 1), (1, 0), (2, 0)]
        with pytest.raises(ValueError):
            total_loss(head_outputs(V, vert), head_outputs(H, horiz), [encs], GRID, matcher="greedy")


class TestLogitPath:
    def test_matches_probability_path(self, rng):
        from grouplane.tensor import sigmoid

        x = rng.normal(0, 3, (2, 5))
        tg = (rng.uniform(size=(2, 5)) < 0.5).astype(float)
        a = loss_existence(sigmoid(t(x)), tg, 2).item()
        b = loss_existence(sigmoid(t(x)), tg, 2, logits=t(x)).item()
        assert a == pytest.approx(b, rel=1e-12)
        xv = rng.normal(0, 3, (1, 2, 4, 1))
        tv, m = (rng.uniform(size=(1, 2, 4)) < 0.5).astype(float), np.ones((1, 2))
        a = loss_visibility(sigmoid(t(xv)), tv, m, 1).item()
        b = loss_visibility(sigmoid(t(xv)), tv, m, 1, logits=t(xv)).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_saturated_negative_still_learns(self):
        from grouplane.tensor import default_dtype, sigmoid

        with default_dtype(np.float32):
            x = Tensor(np.array([[25.0]], dtype=np.float32), requires_grad=True)
            p = sigmoid(x)
            assert p.data[0, 0] == 1.0
            loss_existence(p, np.zeros((1, 1)), 1).backward()
            assert x.grad[0, 0] == 0.0  # clamped log: the gradient is lost
            x.grad = None
            loss_existence(sigmoid(x), np.zeros((1, 1)), 1, logits=x).backward()
            assert x.grad[0, 0] == pytest.approx(1.0)

    def test_logit_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_existence(t([[0.5, 0.5]]), np.ones((1, 2)), 1, logits=t([[0.0]]))
