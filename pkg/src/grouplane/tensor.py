"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the lane network needs are provided. Shapes must match
exactly except for scalar operands and the bias add inside ``conv2d_grouped``
and ``linear``; there is no general broadcasting.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels

LOG_EPS = 1e-12

_default_dtype = np.dtype(np.float64)
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the autograd graph (non-scalar loss, double backward, ...)."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


_CONSUMED = object()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else _default_dtype
        arr = np.array(data, dtype=dtype)
        _check_finite(arr, "Tensor()")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autograd ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached from any tensor that requires grad")
        if self._backward is _CONSUMED:
            raise GraphError("backward already called on this graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is _CONSUMED:
                raise GraphError(f"graph through {node.op} was already consumed by a previous backward")
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = _CONSUMED

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return mul(self, 1.0 / other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_data(x, like: Tensor):
    if isinstance(x, Tensor):
        if x.shape != like.shape:
            raise ValueError(f"shape mismatch {like.shape} vs {x.shape} (no broadcasting)")
        return x.data
    if np.ndim(x) != 0:
        raise ValueError("non-tensor operands must be scalars")
    return x


def add(a: Tensor, b) -> Tensor:
    bd = _as_data(b, a)
    tensor_b = isinstance(b, Tensor)

    def backward(g):
        return (g, g) if tensor_b else (g,)

    parents = (a, b) if tensor_b else (a,)
    return Tensor._result(a.data + bd, parents, backward, "add")


def mul(a: Tensor, b) -> Tensor:
    bd = _as_data(b, a)
    if isinstance(b, Tensor):
        ad = a.data

        def backward(g):
            return g * bd, g * ad

        return Tensor._result(ad * bd, (a, b), backward, "mul")

    def backward_scalar(g):
        return (g * bd,)

    return Tensor._result(a.data * bd, (a,), backward_scalar, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), backward, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return Tensor._result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "transpose")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def index(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    advanced = _is_advanced(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor._result(np.array(a.data[idx]), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(data, tuple(tensors), backward, "concat")


# -- elementwise ------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return Tensor._result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """``log(sigmoid(a))`` without saturation: the gradient ``sigmoid(-a)`` never rounds to 0."""
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return Tensor._result(y, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def log(a: Tensor) -> Tensor:
    """Natural log with the input clamped from below at ``LOG_EPS``."""
    x = a.data
    safe = np.maximum(x, LOG_EPS)
    live = x > LOG_EPS

    def backward(g):
        return (np.where(live, g / safe, 0.0).astype(x.dtype, copy=False),)

    return Tensor._result(np.log(safe), (a,), backward, "log")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return Tensor._result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


_ELEMENTWISE = {"sigmoid": sigmoid, "relu": relu, "log": log, "l1": tabs}


def elementwise(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a)


# -- reductions and normalisations -----------------------------------------

def softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last axis")
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (a,), backward, "softmax")


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal element."""
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for rank {a.ndim}")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ValueError("cannot reduce over an empty axis")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return Tensor._result(out, (a,), backward, "reduce_max")


# -- layers -----------------------------------------------------------------

def conv2d_grouped(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1,
                   stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution whose output channel block j sees only input block j."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d_grouped expects input [B,C,H,W] and weight [Cout,Cin/g,kh,kw]")
    B, Cin, H, W = x.shape
    Cout, cig, kh, kw = weight.shape
    g = int(groups)
    if g < 1 or Cin % g or Cout % g:
        raise ValueError(f"groups={g} must divide Cin={Cin} and Cout={Cout}")
    if cig != Cin // g:
        raise ValueError(f"weight expects {cig} input channels per group, input has {Cin // g}")
    if bias is not None and bias.shape != (Cout,):
        raise ValueError(f"bias shape {bias.shape} != ({Cout},)")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ValueError("kernel does not fit the padded input")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    L = Ho * Wo
    K = cig * kh * kw
    cog = Cout // g

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(B, Cin, L)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = kernels.im2col(xp, kh, kw, stride)
    colsg = cols.reshape(B, g, K, L)
    wg = weight.data.reshape(g, cog, K)
    out = np.matmul(wg[None], colsg).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(gout):
        go = gout.reshape(B, g, cog, L)
        dw = np.matmul(go, colsg.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(wg.transpose(0, 2, 1)[None], go).reshape(B, Cin * kh * kw, L)
        if pointwise:
            dx = dcols.reshape(B, Cin, H, W)
        else:
            dxp = kernels.col2im(dcols, Cin, Hp, Wp, kh, kw, stride)
            dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
            dx = np.ascontiguousarray(dx)
        db = gout.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._result(out, parents, backward, "conv2d_grouped")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    M, K = weight.shape
    if x.shape[-1] != K:
        raise ValueError(f"linear: input last extent {x.shape[-1]} != weight in-features {K}")
    if bias is not None and bias.shape != (M,):
        raise ValueError(f"bias shape {bias.shape} != ({M},)")
    lead = x.shape[:-1]
    xf = x.data.reshape(-1, K)
    out = xf @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gf = g.reshape(-1, M)
        dx = (gf @ weight.data).reshape(x.shape)
        dw = gf.T @ xf
        if bias is None:
            return dx, dw
        return dx, dw, gf.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._result(out.reshape(*lead, M), parents, backward, "linear")


def grouped_weighted_sum(features: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum along the last axis, weights shared within channel groups.

    ``features`` is ``[B, N*G, H, W]``, ``weights`` is ``[B, N, H, W]``; channel
    ``n*G + g`` is reduced with ``weights[:, n]``. Returns ``[B, N*G, H, 1]``.
    """
    if features.ndim != 4 or weights.ndim != 4:
        raise ValueError("expected rank-4 features and weights")
    B, NG, H, W = features.shape
    if weights.shape[0] != B or weights.shape[2:] != (H, W) or NG % weights.shape[1]:
        raise ValueError(f"shape mismatch: features {features.shape}, weights {weights.shape}")
    N = weights.shape[1]
    G = NG // N
    f = features.data.reshape(B, N, G, H, W)
    w = weights.data.reshape(B, N, 1, H, W)
    out = (f * w).sum(axis=-1).reshape(B, NG, H, 1)

    def backward(g):
        g5 = g.reshape(B, N, G, H, 1)
        dfeat = (g5 * w).reshape(B, NG, H, W)
        dw = (g5 * f).sum(axis=2).reshape(B, N, H, W)
        return dfeat, dw

    return Tensor._result(out, (features, weights), backward, "grouped_weighted_sum")


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Build a graph node from precomputed forward data and a backward closure."""
    return Tensor._result(data, parents, backward, op)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"GLCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, "Tensor | np.ndarray"]) -> None:
    """Write parameters as little-endian float32, ordered by name."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            value = params[name]
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        out[name] = arr.astype(np.float32)
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after {count} parameters")
    return out


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t._backward is None]
