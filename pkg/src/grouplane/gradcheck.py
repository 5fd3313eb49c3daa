"""Central finite-difference checks of every differentiable operation.

Each case builds leaf tensors and a closure computing an output from them.
The output is reduced to a scalar with a fixed random projection, and the
analytic gradient is compared with ``(f(x+eps) - f(x-eps)) / 2 eps`` on all
coordinates (or a random subset for large cases).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .codec import Lane3D
from .geometry import BevGridSpec, CameraRig, DepthBins, lift_splat
from .matching import (
    encode_labels,
    loss_category,
    loss_existence,
    loss_offsets,
    loss_rowindex,
    loss_visibility,
    match_batch,
    total_loss,
)
from .network import GroupLaneNet, NetworkConfig, category_foreground_gather
from .tensor import Tensor, default_dtype, no_grad

EPS = 1e-5
TOLERANCE = 1e-4
DEFAULT_SEEDS = 20
MAX_COORDS = 48

Case = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


def _leaf(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _away_from(rng, shape, points=(0.0,), margin=0.05, scale=2.0):
    """Uniform samples at least ``margin`` from every kink in ``points``."""
    x = rng.uniform(-scale, scale, size=shape)
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.copysign(margin + rng.uniform(0, 0.1, size=shape), x - p), x)
    return x


def _distinct(rng, shape):
    """Values whose pairwise gaps are at least 0.05, so maxima are unambiguous."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, size=n) - n * 0.025).reshape(shape)


def _binary(rng, shape):
    return (rng.random(shape) < 0.5).astype(np.float64)


def _onehot_rows(rng, shape, density=0.7):
    """One-hot along the last axis on a random subset of the leading positions."""
    lead, k = shape[:-1], shape[-1]
    out = np.zeros(shape)
    keep = rng.random(lead) < density
    idx = rng.integers(k, size=lead)
    out[keep, idx[keep]] = 1.0
    return out


def _unary(fn, make):
    def case(rng):
        a = _leaf(make(rng))
        return [a], lambda: fn(a)
    return case


def _binary_op(fn, shape=(3, 4)):
    def case(rng):
        a, b = _leaf(rng.standard_normal(shape)), _leaf(rng.standard_normal(shape))
        return [a, b], lambda: fn(a, b)
    return case


def _conv_case(cin, cout, k, stride, padding, groups, bias=True, size=(5, 6)):
    def case(rng):
        x = _leaf(rng.standard_normal((2, cin) + size))
        w = _leaf(rng.standard_normal((cout, cin // groups, k, k)) * 0.5)
        leaves = [x, w]
        b = None
        if bias:
            b = _leaf(rng.standard_normal(cout))
            leaves.append(b)
        return leaves, lambda: T.conv2d_grouped(x, w, b, groups=groups, stride=stride, padding=padding)
    return case


def _linear_case(rng):
    x = _leaf(rng.standard_normal((2, 3, 5)))
    w = _leaf(rng.standard_normal((4, 5)))
    b = _leaf(rng.standard_normal(4))
    return [x, w, b], lambda: T.linear(x, w, b)


def _gws_case(rng):
    f = _leaf(rng.standard_normal((2, 6, 3, 5)))
    w = _leaf(rng.random((2, 2, 3, 5)))
    return [f, w], lambda: T.grouped_weighted_sum(f, w)


def _gather_case(rng):
    f = _leaf(rng.standard_normal((2, 2 * 3, 4, 5)))
    logits = rng.standard_normal((2, 2, 4, 5))
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    w = _leaf(p)
    return [f, w], lambda: category_foreground_gather(f, w)


_SPLAT_RIG = CameraRig.forward_facing((32, 64), focal=40.0, height=1.5, pitch_deg=10.0)
_SPLAT_BINS = DepthBins(2.0, 30.0, 4)
_SPLAT_GRID = BevGridSpec((-8.0, 8.0), (2.0, 30.0), 4, 5)


def _splat_case(rng):
    ctx = _leaf(rng.standard_normal((2, 3, 2, 4)))
    probs = _leaf(rng.random((2, _SPLAT_BINS.count, 2, 4)))
    return [ctx, probs], lambda: lift_splat(ctx, probs, _SPLAT_RIG, _SPLAT_BINS, _SPLAT_GRID)


def _prob(rng, shape):
    return rng.uniform(0.05, 0.95, size=shape)


def _loss_existence(rng):
    y = _leaf(_prob(rng, (2, 4)))
    t = _binary(rng, (2, 4))
    return [y], lambda: loss_existence(y, t, 3)


def _loss_existence_logits(rng):
    x = _leaf(rng.standard_normal((2, 4)) * 4)
    t = _binary(rng, (2, 4))
    return [x], lambda: loss_existence(T.sigmoid(x), t, 3, logits=x)


def _loss_visibility_logits(rng):
    x = _leaf(rng.standard_normal((2, 3, 5, 1)) * 4)
    t = _binary(rng, (2, 3, 5))
    m = _binary(rng, (2, 3))
    return [x], lambda: loss_visibility(T.sigmoid(x), t, m, 2, logits=x)


def _loss_visibility(positive_only):
    def case(rng):
        y = _leaf(_prob(rng, (2, 3, 5, 1)))
        t = _binary(rng, (2, 3, 5))
        m = _binary(rng, (2, 3))
        return [y], lambda: loss_visibility(y, t, m, 2, positive_only)
    return case


def _loss_rowindex(rng):
    y = _leaf(_prob(rng, (2, 3, 4, 6)))
    t = _onehot_rows(rng, (2, 3, 4, 6))
    return [y], lambda: loss_rowindex(y, t, 2)


def _loss_category(rng):
    y = _leaf(_prob(rng, (2, 3, 4)))
    t = _onehot_rows(rng, (2, 3, 4))
    return [y], lambda: loss_category(y, t, 3)


def _loss_offsets(rng):
    shape = (2, 3, 5)
    t_lat, t_z = rng.standard_normal(shape), rng.standard_normal(shape)
    y_lat = _leaf((t_lat + _away_from(rng, shape, margin=0.05)).reshape(shape + (1,)))
    y_z = _leaf((t_z + _away_from(rng, shape, margin=0.05)).reshape(shape + (1,)))
    m = _binary(rng, shape)
    return [y_lat, y_z], lambda: loss_offsets(y_lat, y_z, t_lat, t_z, m, 2)


MICRO_CONFIG = NetworkConfig(
    N=2, C_g=2, G=2, image_size=(32, 32),
    grid=BevGridSpec((-6.0, 6.0), (2.0, 26.0), 4, 5),
    depth=DepthBins(2.0, 30.0, 4), backbone_widths=(4, 4, 6, 6), bev_blocks=1,
)
MICRO_RIG = CameraRig.forward_facing((32, 32), focal=24.0, height=1.5, pitch_deg=10.0)


def _micro_labels(rng) -> list[Lane3D]:
    y = np.linspace(2.0, 26.0, 25)
    x0 = rng.uniform(-3.0, 3.0)
    vert = Lane3D(np.stack([x0 + rng.uniform(-0.05, 0.05) * y, y, 0.1 * np.sin(y / 5)], axis=1),
                  int(rng.integers(2)))
    x = np.linspace(-6.0, 6.0, 13)
    y0 = rng.uniform(6.0, 20.0)
    horiz = Lane3D(np.stack([x, np.full_like(x, y0), np.zeros_like(x)], axis=1), int(rng.integers(2)))
    return [vert, horiz]


def _end_to_end(rng):
    cfg = MICRO_CONFIG
    model = GroupLaneNet(cfg, seed=int(rng.integers(2**31)))
    # zero biases on empty BEV cells put ReLU inputs exactly on the kink; jitter to a generic point
    for p in model.parameters():
        p.data += rng.normal(0.0, 0.05, size=p.shape)
    images = _leaf(rng.standard_normal((1, 3) + cfg.image_size))
    encodings = [encode_labels(_micro_labels(rng), cfg.grid, cfg.G)]
    with no_grad():
        vert, horiz = model(images, MICRO_RIG)
        match = match_batch(vert, horiz, encodings, cfg.grid)
    leaves = [images] + model.parameters()

    def f():
        v, h = model(images, MICRO_RIG)
        return total_loss(v, h, encodings, cfg.grid, match=match)[0]

    return leaves, f


CASES: dict[str, Case] = {
    "add": _binary_op(lambda a, b: a + b),
    "sub": _binary_op(lambda a, b: a - b),
    "mul": _binary_op(lambda a, b: a * b),
    "mul_scalar": _unary(lambda a: a * 2.5, lambda r: r.standard_normal((3, 4))),
    "div_scalar": _unary(lambda a: a / 3.0, lambda r: r.standard_normal((3, 4))),
    "neg": _unary(lambda a: -a, lambda r: r.standard_normal((3, 4))),
    "sum": _unary(lambda a: a.sum(), lambda r: r.standard_normal((3, 4))),
    "sum_axis": _unary(lambda a: a.sum(axis=1, keepdims=True), lambda r: r.standard_normal((2, 3, 4))),
    "reshape": _unary(lambda a: a.reshape(6, 4), lambda r: r.standard_normal((2, 3, 4))),
    "transpose": _unary(lambda a: a.transpose(2, 0, 1), lambda r: r.standard_normal((2, 3, 4))),
    "index_slice": _unary(lambda a: a[1:, ::2], lambda r: r.standard_normal((3, 5))),
    "index_gather": _unary(lambda a: a[np.array([0, 2, 0]), np.array([1, 1, 3])],
                           lambda r: r.standard_normal((3, 5))),
    "concat": _binary_op(lambda a, b: T.concat([a, b], axis=1)),
    "sigmoid": _unary(T.sigmoid, lambda r: r.standard_normal((3, 4)) * 3),
    "log_sigmoid": _unary(T.log_sigmoid, lambda r: r.standard_normal((3, 4)) * 10),
    "relu": _unary(T.relu, lambda r: _away_from(r, (3, 4))),
    "log": _unary(T.log, lambda r: r.uniform(0.2, 3.0, (3, 4))),
    "l1": _unary(T.tabs, lambda r: _away_from(r, (3, 4))),
    "clamp": _unary(lambda a: T.clamp(a, -0.5, 0.5), lambda r: _away_from(r, (3, 4), (-0.5, 0.5))),
    "softmax": _unary(T.softmax_lastdim, lambda r: r.standard_normal((2, 3, 5))),
    "reduce_max": _unary(lambda a: T.reduce_max(a, axis=1), lambda r: _distinct(r, (2, 4, 3))),
    "reduce_max_keepdims": _unary(lambda a: T.reduce_max(a, axis=2, keepdims=True),
                                  lambda r: _distinct(r, (2, 3, 4))),
    "conv2d": _conv_case(3, 4, 3, 1, 1, 1),
    "conv2d_stride2": _conv_case(2, 4, 3, 2, 1, 1, size=(6, 7)),
    "conv2d_grouped": _conv_case(4, 6, 1, 1, 0, 2),
    "conv2d_grouped_3x3": _conv_case(6, 6, 3, 1, 1, 3, bias=False),
    "linear": _linear_case,
    "grouped_weighted_sum": _gws_case,
    "lift_splat": _splat_case,
    "category_foreground_gather": _gather_case,
    "loss_existence": _loss_existence,
    "loss_existence_logits": _loss_existence_logits,
    "loss_visibility": _loss_visibility(False),
    "loss_visibility_logits": _loss_visibility_logits,
    "loss_visibility_positive": _loss_visibility(True),
    "loss_rowindex": _loss_rowindex,
    "loss_category": _loss_category,
    "loss_offsets": _loss_offsets,
    "end_to_end": _end_to_end,
}


@dataclass
class OpResult:
    op: str
    seeds: int
    max_rel_error: float
    worst_seed: int
    passed: bool

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class SuiteReport:
    results: list[OpResult]
    tolerance: float
    eps: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failed_ops(self) -> list[str]:
        return [r.op for r in self.results if not r.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failed_ops": self.failed_ops, "tolerance": self.tolerance,
                "eps": self.eps, "ops": [r.to_dict() for r in self.results]}


def _negate_backward(out: Tensor) -> None:
    orig = out._backward
    out._backward = lambda g: tuple(None if d is None else -d for d in orig(g))


def check_case(case: Case, seed: int, eps: float = EPS, max_coords: int = MAX_COORDS,
               negate: bool = False) -> float:
    """Relative error ``|a - n| / max(|a|, |n|)`` (2-norms) over the checked coordinates."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        leaves, f = case(rng)
        out = f()
        proj = rng.standard_normal(out.shape)
        if negate:
            _negate_backward(out)
        (out * Tensor(proj)).sum().backward()
        coords = [(i, j) for i, leaf in enumerate(leaves) for j in range(leaf.size)]
        if len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[k] for k in sorted(pick)]
        analytic = np.array([
            0.0 if leaves[i].grad is None else leaves[i].grad.reshape(-1)[j] for i, j in coords
        ])
        numeric = np.empty(len(coords))
        with no_grad():
            for k, (i, j) in enumerate(coords):
                data = leaves[i].data
                at = np.unravel_index(j, data.shape)
                orig = data[at]
                data[at] = orig + eps
                up = float(np.sum(f().data * proj))
                data[at] = orig - eps
                down = float(np.sum(f().data * proj))
                data[at] = orig
                numeric[k] = (up - down) / (2 * eps)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def run_suite(seed: int = 0, n_seeds: int = DEFAULT_SEEDS, ops: list[str] | None = None,
              negate: str | None = None, tolerance: float = TOLERANCE) -> SuiteReport:
    names = list(CASES) if ops is None else ops
    unknown = [n for n in names + ([negate] if negate else []) if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck ops: {unknown}")
    results = []
    for name in names:
        errors = [check_case(CASES[name], [seed, k], negate=(name == negate)) for k in range(n_seeds)]
        worst = int(np.argmax(errors))
        results.append(OpResult(name, n_seeds, errors[worst], worst, errors[worst] <= tolerance))
    return SuiteReport(results, tolerance, EPS)
