"""Pinhole camera geometry and the lift-splat view transform.

Frames: the ego frame has x lateral (right), y longitudinal (forward) and
z up, in meters. The camera frame is x right, y down, z forward. Pixel
coordinates are continuous with pixel ``k`` covering ``[k, k+1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Tensor, custom_op


@dataclass(frozen=True, eq=False)
class CameraRig:
    intrinsics: np.ndarray
    extrinsics: np.ndarray  # camera -> ego
    image_size: tuple[int, int]  # (H, W) pixels

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        T = np.asarray(self.extrinsics, dtype=np.float64)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and extrinsics 4x4")
        if K[1, 0] or K[2, 0] or K[2, 1] or K[2, 2] != 1.0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must be upper-triangular with positive focal lengths")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("extrinsic rotation is not a proper rotation")
        if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("extrinsics bottom row must be [0, 0, 0, 1]")
        if min(self.image_size) <= 0:
            raise ValueError("image size must be positive")

    @classmethod
    def forward_facing(cls, image_size=(64, 160), focal: float = 100.0, height: float = 1.5,
                       pitch_deg: float = 8.0, lateral: float = 0.0,
                       principal: tuple[float, float] | None = None) -> "CameraRig":
        """A camera at ``(lateral, 0, height)`` looking along +y, tilted down by ``pitch_deg``."""
        H, W = image_size
        cx, cy = principal if principal is not None else (W / 2.0, H / 2.0)
        K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
        th = np.deg2rad(pitch_deg)
        s, c = np.sin(th), np.cos(th)
        # columns: camera x, y, z axes expressed in the ego frame
        R = np.array([[1.0, 0.0, 0.0], [0.0, -s, c], [0.0, -c, -s]])
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = [lateral, 0.0, height]
        return cls(K, T, (H, W))

    def translated(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> "CameraRig":
        T = self.extrinsics.copy()
        T[:3, 3] += [dx, dy, dz]
        return CameraRig(self.intrinsics, T, self.image_size)

    def key(self) -> bytes:
        return self.intrinsics.tobytes() + self.extrinsics.tobytes() + np.array(self.image_size).tobytes()

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.extrinsics.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(np.array(d["intrinsics"]), np.array(d["extrinsics"]), tuple(d["image_size"]))

    def __eq__(self, other) -> bool:
        return isinstance(other, CameraRig) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())


@dataclass(frozen=True)
class DepthBins:
    d_min: float = 1.0
    d_max: float = 60.0
    count: int = 32

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if self.count < 2:
            raise ValueError("need at least 2 depth bins")

    @property
    def centers(self) -> np.ndarray:
        step = (self.d_max - self.d_min) / self.count
        return self.d_min + (np.arange(self.count) + 0.5) * step


@dataclass(frozen=True)
class BevGridSpec:
    x_range: tuple[float, float] = (-10.0, 10.0)
    y_range: tuple[float, float] = (3.0, 103.0)
    rows: int = 12  # H_b, one per longitudinal line
    cols: int = 50  # W_b

    def __post_init__(self):
        if not (self.x_range[0] < self.x_range[1] and self.y_range[0] < self.y_range[1]):
            raise ValueError("grid ranges must be increasing")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid extents must be positive")

    @property
    def cell_w(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.cols

    @property
    def cell_h(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.rows

    @property
    def row_centers(self) -> np.ndarray:
        """y of each row's center line."""
        return self.y_range[0] + (np.arange(self.rows) + 0.5) * self.cell_h

    @property
    def col_centers(self) -> np.ndarray:
        """x of each column's center line."""
        return self.x_range[0] + (np.arange(self.cols) + 0.5) * self.cell_w

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_index(self, x, y):
        """Flat ``row * cols + col`` index of the cell containing (x, y); -1 outside."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        c = np.floor((x - self.x_range[0]) / self.cell_w)
        r = np.floor((y - self.y_range[0]) / self.cell_h)
        inside = (c >= 0) & (c < self.cols) & (r >= 0) & (r < self.rows)
        return np.where(inside, r * self.cols + c, -1).astype(np.int64)

    def transposed(self) -> "BevGridSpec":
        """Swap the roles of x and y (and of rows and columns)."""
        return BevGridSpec(self.y_range, self.x_range, self.cols, self.rows)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "rows": self.rows, "cols": self.cols}

    @classmethod
    def from_dict(cls, d: dict) -> "BevGridSpec":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), int(d["rows"]), int(d["cols"]))


def project_ego_to_image(point, rig: CameraRig):
    """Return ``(u, v, depth)`` for an ego-frame point, or ``None`` when out of view."""
    p = np.asarray(point, dtype=np.float64)
    R = rig.extrinsics[:3, :3]
    t = rig.extrinsics[:3, 3]
    pc = R.T @ (p - t)
    depth = pc[2]
    if depth <= 0:
        return None
    uvw = rig.intrinsics @ (pc / depth)
    u, v = uvw[0], uvw[1]
    H, W = rig.image_size
    if not (0.0 <= u < W and 0.0 <= v < H):
        return None
    return float(u), float(v), float(depth)


def project_points(points: np.ndarray, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection without the image-bounds test: ``(uv [n,2], depth [n])``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    R = rig.extrinsics[:3, :3]
    t = rig.extrinsics[:3, 3]
    pc = (p - t) @ R
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uvw = (pc / depth[:, None]) @ rig.intrinsics.T
    return uvw[:, :2], depth


def unproject_pixel(u, v, depth, rig: CameraRig) -> np.ndarray:
    """Ego-frame point at camera-forward distance ``depth`` along pixel (u, v)."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    uv1 = np.stack(np.broadcast_arrays(u, v, np.ones_like(u)), axis=-1)
    rays = uv1 @ np.linalg.inv(rig.intrinsics).T
    pc = rays * depth[..., None]
    R = rig.extrinsics[:3, :3]
    t = rig.extrinsics[:3, 3]
    return pc @ R.T + t


@dataclass(frozen=True, eq=False)
class Frustum:
    """Static (bin, pixel) -> BEV cell table for one rig / bins / grid."""

    cells: np.ndarray  # [D, Hs*Ws] int64, -1 = dropped
    points: np.ndarray  # [D, Hs*Ws, 3] ego coordinates of bin centers
    feature_size: tuple[int, int]
    n_cells: int
    pixel_uv: np.ndarray = field(repr=False)  # [Hs*Ws, 2]

    @property
    def size(self) -> int:
        return self.cells.size


_FRUSTUM_CACHE: dict = {}


def feature_pixel_centers(image_size, feature_size) -> np.ndarray:
    H, W = image_size
    Hs, Ws = feature_size
    v = (np.arange(Hs) + 0.5) * (H / Hs)
    u = (np.arange(Ws) + 0.5) * (W / Ws)
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu.ravel(), vv.ravel()], axis=-1)


def build_frustum(rig: CameraRig, bins: DepthBins, feature_size, grid: BevGridSpec) -> Frustum:
    feature_size = (int(feature_size[0]), int(feature_size[1]))
    key = (rig.key(), bins, feature_size, grid)
    cached = _FRUSTUM_CACHE.get(key)
    if cached is not None:
        return cached
    uv = feature_pixel_centers(rig.image_size, feature_size)
    depths = bins.centers
    pts = unproject_pixel(uv[None, :, 0], uv[None, :, 1],
                          np.broadcast_to(depths[:, None], (bins.count, uv.shape[0])), rig)
    cells = grid.cell_index(pts[..., 0], pts[..., 1])
    frustum = Frustum(cells=cells, points=pts, feature_size=feature_size,
                      n_cells=grid.n_cells, pixel_uv=uv)
    _FRUSTUM_CACHE[key] = frustum
    return frustum


def frustum_cache_size() -> int:
    return len(_FRUSTUM_CACHE)


def lift_splat(context: Tensor, depth_probs: Tensor, rig: CameraRig, bins: DepthBins,
               grid: BevGridSpec) -> Tensor:
    """Sum-pool depth-weighted context features into the BEV grid.

    context ``[B, C, Hs, Ws]`` and depth_probs ``[B, D, Hs, Ws]`` give
    ``[B, C, rows, cols]``.
    """
    if context.ndim != 4 or depth_probs.ndim != 4:
        raise ValueError("lift_splat expects rank-4 context and depth tensors")
    B, C, Hs, Ws = context.shape
    if depth_probs.shape != (B, bins.count, Hs, Ws):
        raise ValueError(f"depth_probs shape {depth_probs.shape} != {(B, bins.count, Hs, Ws)}")
    fr = build_frustum(rig, bins, (Hs, Ws), grid)
    P = Hs * Ws
    ctx = np.ascontiguousarray(context.data.reshape(B, C, P))
    probs = np.ascontiguousarray(depth_probs.data.reshape(B, bins.count, P))
    out = kernels.splat_forward(ctx, probs, fr.cells, fr.n_cells)

    def backward(g):
        dctx, dprobs = kernels.splat_backward(
            np.ascontiguousarray(g.reshape(B, C, fr.n_cells)), ctx, probs, fr.cells)
        return dctx.reshape(context.shape), dprobs.reshape(depth_probs.shape)

    return custom_op(out.reshape(B, C, grid.rows, grid.cols), (context, depth_probs),
                     backward, "lift_splat")
