"""The lane network: image -> camera features -> BEV -> two grouped head groups."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .codec import Orientation, SlotOutputs
from .geometry import BevGridSpec, CameraRig, DepthBins, lift_splat
from .nn import Conv2d, Linear, Module
from .tensor import (
    Tensor,
    concat,
    grouped_weighted_sum,
    reduce_max,
    relu,
    sigmoid,
    softmax_lastdim,
)

FEATURE_STRIDE = 16


@dataclass(frozen=True)
class NetworkConfig:
    N: int = 4  # candidate slots per head group
    C_g: int = 8  # channels per slot group
    G: int = 4  # lane categories
    image_size: tuple[int, int] = (64, 160)
    grid: BevGridSpec = field(default_factory=BevGridSpec)
    depth: DepthBins = field(default_factory=lambda: DepthBins(2.0, 104.0, 16))
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64)
    bev_blocks: int = 4
    horizontal_group_enabled: bool = True
    group_conv_enabled: bool = True
    category_guidance_enabled: bool = True
    bev_coords: bool = False

    def __post_init__(self):
        if min(self.N, self.C_g, self.G) < 1:
            raise ValueError("N, C_g and G must be positive")
        H, W = self.image_size
        if H % FEATURE_STRIDE or W % FEATURE_STRIDE:
            raise ValueError(f"image extents {self.image_size} must be divisible by {FEATURE_STRIDE}")
        if len(self.backbone_widths) != 4:
            raise ValueError("the backbone has exactly 4 stride-2 stages")

    @property
    def C(self) -> int:
        return 2 * self.N * self.C_g

    @property
    def D(self) -> int:
        return self.depth.count

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.image_size[0] // FEATURE_STRIDE, self.image_size[1] // FEATURE_STRIDE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["grid"] = self.grid.to_dict()
        d["depth"] = {"d_min": self.depth.d_min, "d_max": self.depth.d_max, "count": self.depth.count}
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        kw = dict(d)
        if "image_size" in kw:
            kw["image_size"] = tuple(kw["image_size"])
        if "grid" in kw:
            kw["grid"] = BevGridSpec.from_dict(kw["grid"])
        if "depth" in kw:
            kw["depth"] = DepthBins(**kw["depth"])
        if "backbone_widths" in kw:
            kw["backbone_widths"] = tuple(kw["backbone_widths"])
        return cls(**kw)

    @classmethod
    def full_scale(cls) -> "NetworkConfig":
        """Full-size model (16 slots per group, 24 x 100 grid); too slow for tests."""
        return cls(N=16, C_g=8, G=14, image_size=(480, 640),
                   grid=BevGridSpec((-10.0, 10.0), (3.0, 103.0), 24, 100),
                   depth=DepthBins(1.0, 60.0, 32))


@dataclass
class HeadOutputs:
    """Six head outputs of one head group; H x W is lines x classes."""

    orientation: Orientation
    exist: Tensor  # [B, N]
    vis: Tensor  # [B, N, H, 1]
    row: Tensor  # [B, N, H, W]
    category: Tensor  # [B, N, G]
    off_lat: Tensor  # [B, N, H, 1]
    off_z: Tensor  # [B, N, H, 1]
    exist_logit: Tensor | None = None  # pre-sigmoid, for saturation-free BCE
    vis_logit: Tensor | None = None

    @property
    def batch(self) -> int:
        return self.exist.shape[0]

    @property
    def n_slots(self) -> int:
        return self.exist.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "exist": self.exist.data,
            "vis": self.vis.data[..., 0],
            "row": self.row.data,
            "category": self.category.data,
            "off_lat": self.off_lat.data[..., 0],
            "off_z": self.off_z.data[..., 0],
        }

    def slot(self, b: int, n: int) -> SlotOutputs:
        a = self.arrays()
        return SlotOutputs(
            float(a["exist"][b, n]), a["vis"][b, n].astype(np.float64),
            a["row"][b, n].astype(np.float64), a["category"][b, n].astype(np.float64),
            a["off_lat"][b, n].astype(np.float64), a["off_z"][b, n].astype(np.float64),
            self.orientation,
        )


class ResBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, padding=1, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, padding=1, rng=rng)
        self.conv2.weight.data *= 0.25

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(relu(self.conv1(x)))


class _Head(Module):
    """Two grouped 1x1 convolutions: ``N*C_g -> N*C_g -> N*out``."""

    def __init__(self, N: int, C_g: int, out: int, groups: int, rng: np.random.Generator,
                 bias_init: float = 0.0):
        self.conv1 = Conv2d(N * C_g, N * C_g, 1, groups=groups, rng=rng)
        self.conv2 = Conv2d(N * C_g, N * out, 1, groups=groups, rng=rng, bias_init=bias_init)
        self.conv2.weight.data *= 0.1

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(relu(self.conv1(x)))


class HeadGroup(Module):
    """Existence, visibility, row index, category and two offset heads.

    The horizontal group transposes its input so grid columns become the
    classified "rows", then runs exactly the vertical code path.
    """

    def __init__(self, orientation: Orientation, cfg: NetworkConfig, rng: np.random.Generator):
        self.orientation = orientation
        self.N, self.C_g, self.G = cfg.N, cfg.C_g, cfg.G
        self.guidance = cfg.category_guidance_enabled
        g = cfg.N if cfg.group_conv_enabled else 1
        n_lines = cfg.grid.rows if orientation is Orientation.VERTICAL else cfg.grid.cols
        self.exist = _Head(cfg.N, cfg.C_g, 1, g, rng, bias_init=-2.0)
        self.vis = _Head(cfg.N, cfg.C_g, 1, g, rng)
        self.row = _Head(cfg.N, cfg.C_g, 1, g, rng)
        self.category = _Head(cfg.N, cfg.C_g, cfg.G, g, rng)
        self.off_lat = _Head(cfg.N, cfg.C_g, 1, g, rng)
        self.off_z = _Head(cfg.N, cfg.C_g, 1, g, rng)
        self.category_mlp = Linear(n_lines, 1, rng=rng)

    def __call__(self, feat: Tensor) -> HeadOutputs:
        if feat.shape[1] != self.N * self.C_g:
            raise ValueError(f"head group expects {self.N * self.C_g} channels, got {feat.shape[1]}")
        if self.orientation is Orientation.HORIZONTAL:
            feat = feat.transpose(0, 1, 3, 2)
        B, _, H, W = feat.shape
        N, G = self.N, self.G

        e = self.exist(feat)  # [B, N, H, W]
        exist_logit = reduce_max(reduce_max(e, axis=3), axis=2)
        vis_logit = reduce_max(self.vis(feat), axis=3, keepdims=True)
        exist, vis = sigmoid(exist_logit), sigmoid(vis_logit)
        row = softmax_lastdim(self.row(feat))

        cat_logits = self.category(feat)  # [B, N*G, H, W]
        if self.guidance:
            fg = category_foreground_gather(cat_logits, row)  # [B, N*G, H, 1]
            cat = self.category_mlp(fg.reshape(B, N, G, H)).reshape(B, N, G)
        else:
            cat = reduce_max(reduce_max(cat_logits, axis=3), axis=2).reshape(B, N, G)
        category = softmax_lastdim(cat)

        off_lat = category_foreground_gather(self.off_lat(feat), row)
        off_z = category_foreground_gather(self.off_z(feat), row)
        return HeadOutputs(self.orientation, exist, vis, row, category, off_lat, off_z,
                           exist_logit, vis_logit)


def category_foreground_gather(features: Tensor, row_probs: Tensor) -> Tensor:
    """Expectation of per-cell features under each slot's row distribution.

    ``features [B, N*G, H, W]``, ``row_probs [B, N, H, W]`` -> ``[B, N*G, H, 1]``.
    """
    return grouped_weighted_sum(features, row_probs)


def split_groups(bev: Tensor) -> tuple[Tensor, Tensor]:
    """Channel halves for the vertical and horizontal head groups."""
    C = bev.shape[1]
    if C % 2:
        raise ValueError(f"cannot split {C} channels into two halves")
    return bev[:, : C // 2], bev[:, C // 2:]


STAGES = ("backbone", "lss", "bev_encoder", "heads")


class GroupLaneNet(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        widths = cfg.backbone_widths
        cins = (3,) + widths[:-1]
        self.backbone = [Conv2d(ci, co, 3, stride=2, padding=1, rng=rng) for ci, co in zip(cins, widths)]
        cf = widths[-1]
        self.context = Conv2d(cf, cfg.C, 1, rng=rng)
        self.depth1 = Conv2d(cf, cf, 3, padding=1, rng=rng)
        self.depth2 = Conv2d(cf, cfg.D, 1, rng=rng)
        bev_in = cfg.C + (2 if cfg.bev_coords else 0)
        self.bev_in = Conv2d(bev_in, cfg.C, 1, rng=rng) if cfg.bev_coords else None
        self.bev_blocks = [ResBlock(cfg.C, rng) for _ in range(cfg.bev_blocks)]
        self.vertical = HeadGroup(Orientation.VERTICAL, cfg, rng)
        self.horizontal = HeadGroup(Orientation.HORIZONTAL, cfg, rng) if cfg.horizontal_group_enabled else None

    # -- stages -------------------------------------------------------------
    def backbone_neck(self, images: Tensor) -> Tensor:
        H, W = images.shape[2:]
        if H % FEATURE_STRIDE or W % FEATURE_STRIDE:
            raise ValueError(f"image extents {(H, W)} must be divisible by {FEATURE_STRIDE}")
        x = images
        for i, conv in enumerate(self.backbone):
            x = conv(x)
            if i < len(self.backbone) - 1:
                x = relu(x)
        return x

    def depth_head(self, feat: Tensor) -> Tensor:
        logits = self.depth2(relu(self.depth1(relu(feat))))  # [B, D, Hs, Ws]
        return softmax_lastdim(logits.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)

    def bev_encoder(self, bev: Tensor) -> Tensor:
        x = bev
        if self.bev_in is not None:
            x = self.bev_in(concat([x, Tensor(self._coord_planes(x.shape[0], x.dtype))], axis=1))
        for block in self.bev_blocks:
            x = block(x)
        return x

    def _coord_planes(self, B: int, dtype) -> np.ndarray:
        g = self.cfg.grid
        yy, xx = np.meshgrid(np.linspace(-1, 1, g.rows), np.linspace(-1, 1, g.cols), indexing="ij")
        planes = np.stack([xx, yy])[None].astype(dtype)
        return np.broadcast_to(planes, (B, 2, g.rows, g.cols)).copy()

    def __call__(self, images: Tensor, rig: CameraRig, timings: dict | None = None):
        return self.forward(images, rig, timings)

    def forward(self, images: Tensor, rig: CameraRig, timings: dict | None = None):
        """Returns ``(vertical HeadOutputs, horizontal HeadOutputs or None)``."""
        t0 = time.perf_counter()
        feat = self.backbone_neck(images)
        t1 = time.perf_counter()
        ctx = self.context(relu(feat))
        depth = self.depth_head(feat)
        bev = lift_splat(ctx, depth, rig, self.cfg.depth, self.cfg.grid)
        t2 = time.perf_counter()
        bev = self.bev_encoder(bev)
        t3 = time.perf_counter()
        f_v, f_h = split_groups(bev)
        vert = self.vertical(f_v)
        horiz = self.horizontal(f_h) if self.horizontal is not None else None
        t4 = time.perf_counter()
        if timings is not None:
            for name, dt in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
                timings[name] = timings.get(name, 0.0) + dt
        return vert, horiz


def with_flags(cfg: NetworkConfig, **flags) -> NetworkConfig:
    return replace(cfg, **flags)
