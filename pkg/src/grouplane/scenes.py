"""Deterministic synthetic driving scenes and their on-disk dataset format.

A dataset directory holds ``manifest.json`` plus ``scene_%06d.ppm`` (binary
P6 image) and ``scene_%06d.json`` (rig and lanes) per scene.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import Lane3D, LaneEncodeError, Orientation, classify_orientation, encode
from .geometry import BevGridSpec, CameraRig, project_points

FORMAT_VERSION = 1
FAMILIES = ("straight", "quadratic", "clothoid")

# (color, dash pattern as (on, off) meters or None for solid) per category
_BASE_STYLES = [
    ((235, 235, 235), None),
    ((245, 200, 30), (4.0, 4.0)),
    ((40, 190, 245), None),
    ((240, 80, 50), (2.0, 2.0)),
]


class DatasetError(RuntimeError):
    pass


def category_style(k: int) -> tuple[tuple[int, int, int], tuple[float, float] | None]:
    if k < len(_BASE_STYLES):
        return _BASE_STYLES[k]
    hue = (k * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.8, 0.95)
    dash = None if k % 2 == 0 else (3.0, 3.0)
    return (round(r * 255), round(g * 255), round(b * 255)), dash


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    lane_count: tuple[int, int] = (2, 3)  # vertical lanes, inclusive range
    families: tuple[str, ...] = FAMILIES
    lateral_spacing: float = 3.6
    horizontal_prob: float = 0.0
    horizontal_y: tuple[float, float] = (8.0, 30.0)
    G: int = 4
    elevation_amplitude: float = 0.3
    image_size: tuple[int, int] = (64, 160)
    camera_height: float = 1.5
    pitch_deg: float = 8.0
    focal: float = 100.0
    grid: BevGridSpec = field(default_factory=BevGridSpec)
    point_spacing: float = 1.0

    def __post_init__(self):
        lo, hi = self.lane_count
        if not 0 <= lo <= hi:
            raise ValueError("lane_count must be an increasing non-negative range")
        if not self.families or any(f not in FAMILIES for f in self.families):
            raise ValueError(f"families must be a non-empty subset of {FAMILIES}")
        if not 0.0 <= self.horizontal_prob <= 1.0:
            raise ValueError("horizontal_prob must lie in [0, 1]")
        if self.lateral_spacing <= 0 or self.point_spacing <= 0 or self.focal <= 0:
            raise ValueError("spacings and focal length must be positive")
        if self.G < 1:
            raise ValueError("G must be at least 1")
        if not 0.0 <= self.elevation_amplitude <= 0.3:
            raise ValueError("elevation_amplitude must lie in [0, 0.3]")
        ylo, yhi = self.horizontal_y
        if not self.grid.y_range[0] <= ylo < yhi <= self.grid.y_range[1]:
            raise ValueError("horizontal_y must be an increasing range inside the grid")
        if self.camera_height <= 0:
            raise ValueError("camera_height must be positive")

    def rig(self) -> CameraRig:
        return CameraRig.forward_facing(self.image_size, self.focal, self.camera_height,
                                        self.pitch_deg)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "lane_count": list(self.lane_count),
            "families": list(self.families),
            "lateral_spacing": self.lateral_spacing,
            "horizontal_prob": self.horizontal_prob,
            "horizontal_y": list(self.horizontal_y),
            "G": self.G,
            "elevation_amplitude": self.elevation_amplitude,
            "image_size": list(self.image_size),
            "camera_height": self.camera_height,
            "pitch_deg": self.pitch_deg,
            "focal": self.focal,
            "grid": self.grid.to_dict(),
            "point_spacing": self.point_spacing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("lane_count", "horizontal_y", "image_size", "families"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "grid" in kw:
            kw["grid"] = BevGridSpec.from_dict(kw["grid"])
        return cls(**kw)


@dataclass(eq=False)
class Scene:
    image: np.ndarray  # [H, W, 3] uint8
    rig: CameraRig
    lanes: list[Lane3D]
    index: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.index == other.index and self.rig == other.rig
                and self.image.shape == other.image.shape
                and self.image.tobytes() == other.image.tobytes()
                and len(self.lanes) == len(other.lanes)
                and all(a.to_dict() == b.to_dict() for a, b in zip(self.lanes, other.lanes)))


def _elevation(rng: np.random.Generator, amplitude: float):
    amp = rng.uniform(0.0, amplitude)
    wavelength = rng.uniform(60.0, 150.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    return lambda y: amp * np.sin(2 * math.pi * y / wavelength + phase)


def _shape(rng: np.random.Generator, family: str):
    """Lateral drift ``f(t)`` with ``t`` in [0, 1] along the grid depth."""
    a = rng.uniform(-1.5, 1.5)
    b = rng.uniform(-1.5, 1.5) if family in ("quadratic", "clothoid") else 0.0
    c = rng.uniform(-1.0, 1.0) if family == "clothoid" else 0.0
    return lambda t: a * t + b * t * t + c * t ** 3


def _visible(lane: Lane3D, rig: CameraRig) -> bool:
    uv, depth = project_points(lane.points, rig)
    H, W = rig.image_size
    ok = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < W) & (uv[:, 1] >= 0) & (uv[:, 1] < H)
    return bool(ok.any())


def _vertical_lanes(spec: SceneSpec, rng: np.random.Generator, z_of) -> list[np.ndarray]:
    grid = spec.grid
    y = np.arange(grid.y_range[0], grid.y_range[1] + 1e-9, spec.point_spacing)
    t = (y - grid.y_range[0]) / (grid.y_range[1] - grid.y_range[0])
    n = int(rng.integers(spec.lane_count[0], spec.lane_count[1] + 1))
    if n == 0:
        return []
    family = spec.families[int(rng.integers(len(spec.families)))]
    margin = 0.5
    for _ in range(100):
        drift = _shape(rng, family)(t)
        center = rng.uniform(-1.8, 1.8)
        offsets = center + (np.arange(n) - (n - 1) / 2.0) * spec.lateral_spacing
        offsets = offsets + rng.uniform(-0.3, 0.3, size=n)
        xs = offsets[:, None] + drift[None, :]
        if xs.min() >= grid.x_range[0] + margin and xs.max() <= grid.x_range[1] - margin:
            return [np.stack([row, y, z_of(y)], axis=1) for row in xs]
    raise RuntimeError("could not place lanes inside the grid")  # pragma: no cover


def _horizontal_lane(spec: SceneSpec, rng: np.random.Generator, z_of) -> np.ndarray:
    grid = spec.grid
    x = np.arange(grid.x_range[0], grid.x_range[1] + 1e-9, spec.point_spacing)
    y0 = rng.uniform(*spec.horizontal_y)
    # never coincide with a row center line, which would make vertical encoding ambiguous
    if np.min(np.abs(grid.row_centers - y0)) < 1e-6:
        y0 += 1e-3
    return np.stack([x, np.full_like(x, y0), np.full_like(x, float(z_of(y0)))], axis=1)


def gen_scene(spec: SceneSpec, index: int) -> Scene:
    rng = np.random.default_rng([spec.seed, index])
    rig = spec.rig()
    z_of = _elevation(rng, spec.elevation_amplitude)
    polylines = [(p, Orientation.VERTICAL) for p in _vertical_lanes(spec, rng, z_of)]
    if rng.random() < spec.horizontal_prob:
        polylines.append((_horizontal_lane(spec, rng, z_of), Orientation.HORIZONTAL))
    lanes = []
    for pts, expected in polylines:
        lane = Lane3D(pts, int(rng.integers(spec.G)), id=len(lanes))
        if classify_orientation(lane, spec.grid) is not expected or not _visible(lane, rig):
            raise RuntimeError(f"generated lane {lane.id} of scene {index} is invalid")  # pragma: no cover
        try:
            encode(lane, spec.grid, spec.G)
        except LaneEncodeError as exc:  # pragma: no cover
            raise RuntimeError(f"generated lane {lane.id} of scene {index} is not encodable") from exc
        lanes.append(lane)
    return Scene(render(lanes, rig, spec.image_size), rig, lanes, index)


def _ground(rig: CameraRig, image_size) -> np.ndarray:
    H, W = image_size
    v, u = np.mgrid[0:H, 0:W] + 0.5
    rays = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(rig.intrinsics).T
    d = rays @ rig.extrinsics[:3, :3].T
    height = rig.extrinsics[2, 3]
    img = np.empty((H, W, 3), dtype=np.float64)
    sky = d[..., 2] >= 0
    img[sky] = (120.0, 150.0, 190.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(sky, 0.0, height / -d[..., 2]) * np.linalg.norm(d[..., :2], axis=-1)
    shade = 95.0 - 45.0 * np.clip(dist / 100.0, 0.0, 1.0)
    img[~sky] = np.stack([shade, shade, shade + 5.0], axis=-1)[~sky]
    return img


def _stroke_samples(pts: np.ndarray, rig: CameraRig, dash):
    """Densely sampled pixel positions along the projected polyline, dash gaps removed."""
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    uv, depth = project_points(pts, rig)
    front = depth > 0.5
    segs = np.nonzero(front[:-1] & front[1:])[0]
    if len(segs) == 0:
        return np.empty((0, 2))
    a, b = uv[segs], uv[segs + 1]
    length = np.linalg.norm(b - a, axis=1)
    n = np.minimum(np.ceil(length * 2.0).astype(np.int64) + 1, 4096)
    seg_of = np.repeat(np.arange(len(segs)), n)
    starts = np.concatenate([[0], np.cumsum(n)[:-1]])
    t = (np.arange(n.sum()) - starts[seg_of]) / np.maximum(n[seg_of] - 1, 1)
    samples = a[seg_of] + t[:, None] * (b - a)[seg_of]
    if dash is not None:
        s = arc[segs][seg_of] + t * (arc[segs + 1] - arc[segs])[seg_of]
        on, off = dash
        samples = samples[np.mod(s, on + off) < on]
    return samples


def render(lanes: list[Lane3D], rig: CameraRig, image_size=None) -> np.ndarray:
    """Shaded ground with each lane drawn as a 3-pixel category-styled stroke."""
    image_size = tuple(image_size or rig.image_size)
    H, W = image_size
    img = _ground(rig, image_size)
    for lane in lanes:
        color, dash = category_style(lane.category)
        samples = _stroke_samples(lane.points, rig, dash)
        if len(samples) == 0:
            continue
        ok = np.all(np.isfinite(samples), axis=1) & (np.abs(samples) < 1e6).all(axis=1)
        px = np.floor(samples[ok]).astype(np.int64)
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                c = px[:, 0] + du
                r = px[:, 1] + dv
                inside = (c >= 0) & (c < W) & (r >= 0) & (r < H)
                img[r[inside], c[inside]] = color
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_ppm(path: Path, image: np.ndarray) -> None:
    H, W, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DatasetError(f"{path}: not an 8-bit P6 image")
    W, H = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=H * W * 3, offset=pos)
    return pixels.reshape(H, W, 3).copy()


@dataclass(frozen=True)
class SplitRule:
    """Scene ``i`` is validation iff ``i % modulus == val_residue``."""

    modulus: int = 2
    val_residue: int = 1

    def __post_init__(self):
        if self.modulus < 2 or not 0 <= self.val_residue < self.modulus:
            raise ValueError("need modulus >= 2 and 0 <= val_residue < modulus")

    def is_val(self, index: int) -> bool:
        return index % self.modulus == self.val_residue

    def to_dict(self) -> dict:
        return {"rule": "index_mod", "modulus": self.modulus, "val_residue": self.val_residue}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitRule":
        if d.get("rule", "index_mod") != "index_mod":
            raise DatasetError(f"unknown split rule {d.get('rule')!r}")
        return cls(int(d["modulus"]), int(d["val_residue"]))


def scene_stem(index: int) -> str:
    return f"scene_{index:06d}"


def _scene_record(scene: Scene) -> dict:
    return {
        "version": FORMAT_VERSION,
        "index": scene.index,
        "image": scene_stem(scene.index) + ".ppm",
        "rig": scene.rig.to_dict(),
        "lanes": [lane.to_dict() for lane in scene.lanes],
    }


def write_dataset(spec: SceneSpec, count: int, out_dir, split: SplitRule = SplitRule()) -> dict:
    if count < 0:
        raise ValueError("count must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        scene = gen_scene(spec, i)
        write_ppm(out / f"{scene_stem(i)}.ppm", scene.image)
        (out / f"{scene_stem(i)}.json").write_text(json.dumps(_scene_record(scene)) + "\n")
    manifest = {
        "version": FORMAT_VERSION,
        "count": count,
        "spec": spec.to_dict(),
        "split": split.to_dict(),
        "n_train": sum(not split.is_val(i) for i in range(count)),
        "n_val": sum(split.is_val(i) for i in range(count)),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


class Dataset:
    """Lazy handle on a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.is_file():
            raise DatasetError(f"missing manifest file: {path}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("version") != FORMAT_VERSION:
            raise DatasetError(f"{path}: version {self.manifest.get('version')!r}, "
                               f"expected {FORMAT_VERSION}")
        self.spec = SceneSpec.from_dict(self.manifest["spec"])
        self.split = SplitRule.from_dict(self.manifest["split"])
        self.count = int(self.manifest["count"])
        self._cache: dict[int, Scene] = {}

    def __len__(self) -> int:
        return self.count

    @property
    def train_indices(self) -> list[int]:
        return [i for i in range(self.count) if not self.split.is_val(i)]

    @property
    def val_indices(self) -> list[int]:
        return [i for i in range(self.count) if self.split.is_val(i)]

    def __getitem__(self, index: int) -> Scene:
        if not 0 <= index < self.count:
            raise IndexError(index)
        if index not in self._cache:
            self._cache[index] = self._load(index)
        return self._cache[index]

    def _load(self, index: int) -> Scene:
        meta_path = self.root / f"{scene_stem(index)}.json"
        if not meta_path.is_file():
            raise DatasetError(f"missing scene file: {meta_path}")
        rec = json.loads(meta_path.read_text())
        if rec.get("version") != self.manifest["version"]:
            raise DatasetError(f"{meta_path}: version {rec.get('version')!r} does not match "
                               f"manifest version {self.manifest['version']}")
        img_path = self.root / rec["image"]
        if not img_path.is_file():
            raise DatasetError(f"missing scene file: {img_path}")
        lanes = [Lane3D.from_dict(d) for d in rec["lanes"]]
        return Scene(read_ppm(img_path), CameraRig.from_dict(rec["rig"]), lanes, rec["index"])


def read_dataset(root) -> Dataset:
    return Dataset(root)
