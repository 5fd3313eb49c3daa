"""Run configuration, training loop, inference and run artifacts."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .codec import Lane3D, decode
from .matching import LossBreakdown, encode_labels, total_loss
from .metrics import EvalConfig, EvalReport, evaluate
from .network import STAGES, GroupLaneNet, NetworkConfig
from .optim import AdamW
from .scenes import Dataset, Scene
from .tensor import Tensor, default_dtype, load_checkpoint, no_grad, save_checkpoint

PREDICTIONS_VERSION = 1
TRAIN_DTYPE = np.float32
SPLITS = ("train", "val", "all")
RESUMABLE_KEYS = ("epochs", "max_steps")

MODEL_FILE = "model.ckpt"
OPTIM_FILE = "optimizer.ckpt"
STATE_FILE = "state.json"
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.jsonl"
TIMINGS_FILE = "timings.jsonl"
REPORT_FILE = "report.json"
PREDICTIONS_FILE = "predictions.json"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.kind != "adamw":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")


@dataclass(frozen=True)
class LossWeights:
    """Per-term multipliers of the total loss; the default is the plain sum."""

    e: float = 1.0
    v: float = 1.0
    r: float = 1.0
    c: float = 1.0
    o: float = 1.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    data: str | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    matcher: str = "som"
    exist_thr: float = 0.5
    vis_thr: float = 0.5
    train_split: str = "train"
    eval_split: str = "val"
    eval_every: int = 1
    max_steps: int | None = None
    vis_positive_only: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.matcher not in ("som", "index"):
            raise ConfigError(f"matcher must be 'som' or 'index', got {self.matcher!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs must be >= 0, batch_size and eval_every >= 1")
        if self.train_split not in SPLITS or self.eval_split not in SPLITS:
            raise ConfigError(f"splits must be one of {SPLITS}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")

    def to_dict(self) -> dict:
        opt = asdict(self.optimizer)
        opt["betas"] = list(self.optimizer.betas)
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(network=self.network.to_dict(), optimizer=opt, eval=self.eval.to_dict(),
                 loss_weights=asdict(self.loss_weights))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "network" in kw:
                kw["network"] = NetworkConfig.from_dict(kw["network"])
            if "optimizer" in kw:
                opt = dict(kw["optimizer"])
                extra = set(opt) - set(OptimizerConfig.__dataclass_fields__)
                if extra:
                    raise ConfigError(f"unknown optimizer keys: {sorted(extra)}")
                if "betas" in opt:
                    opt["betas"] = tuple(opt["betas"])
                kw["optimizer"] = OptimizerConfig(**opt)
            if "eval" in kw:
                kw["eval"] = EvalConfig.from_dict(kw["eval"])
            if "loss_weights" in kw:
                kw["loss_weights"] = LossWeights(**kw["loss_weights"])
            return cls(**kw)
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def with_network(self, **flags) -> "RunConfig":
        return replace(self, network=replace(self.network, **flags))


# -- data ---------------------------------------------------------------------

def image_batch(scenes: list[Scene]) -> Tensor:
    imgs = np.stack([s.image for s in scenes]).astype(TRAIN_DTYPE)
    x = (imgs / np.float32(255.0) - np.float32(0.5)) / np.float32(0.25)
    return Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def _common_rig(scenes: list[Scene]):
    rig = scenes[0].rig
    if any(s.rig != rig for s in scenes[1:]):
        raise ValueError("scenes of one batch must share a camera rig")
    return rig


def split_indices(dataset: Dataset, split: str) -> list[int]:
    if split == "train":
        return dataset.train_indices
    if split == "val":
        return dataset.val_indices
    return list(range(len(dataset)))


def check_compatible(cfg: NetworkConfig, dataset: Dataset) -> None:
    spec = dataset.spec
    if spec.grid != cfg.grid:
        raise ConfigError(f"dataset grid {spec.grid} differs from network grid {cfg.grid}")
    if tuple(spec.image_size) != tuple(cfg.image_size):
        raise ConfigError(f"dataset images {spec.image_size} differ from network input {cfg.image_size}")
    if spec.G > cfg.G:
        raise ConfigError(f"dataset has {spec.G} categories, network only {cfg.G}")


# -- inference ----------------------------------------------------------------

def decode_batch(model: GroupLaneNet, outputs, exist_thr: float, vis_thr: float) -> list[list[Lane3D]]:
    grid = model.cfg.grid
    groups = [o for o in outputs if o is not None]
    lanes: list[list[Lane3D]] = [[] for _ in range(groups[0].batch)]
    for out in groups:
        a = out.arrays()
        for b in range(out.batch):
            for n in range(out.n_slots):
                if a["exist"][b, n] < exist_thr:
                    continue
                lane = decode(out.slot(b, n), grid, exist_thr, vis_thr)
                if lane is not None:
                    lanes[b].append(lane)
    return lanes


def predict(model: GroupLaneNet, dataset: Dataset, indices: list[int], batch_size: int,
            exist_thr: float = 0.5, vis_thr: float = 0.5, timings: dict | None = None):
    """Decoded lanes for each scene in ``indices``."""
    preds: list[list[Lane3D]] = []
    with no_grad(), default_dtype(TRAIN_DTYPE):
        for start in range(0, len(indices), batch_size):
            scenes = [dataset[i] for i in indices[start:start + batch_size]]
            x = image_batch(scenes)
            t0 = time.perf_counter()
            outputs = model(x, _common_rig(scenes), timings)
            t1 = time.perf_counter()
            preds.extend(decode_batch(model, outputs, exist_thr, vis_thr))
            t2 = time.perf_counter()
            if timings is not None:
                timings["decode"] = timings.get("decode", 0.0) + (t2 - t1)
                timings["total"] = timings.get("total", 0.0) + (t2 - t0)
    return preds


def predictions_document(indices: list[int], preds: list[list[Lane3D]], eval_cfg: EvalConfig,
                         data: str | None = None) -> dict:
    return {
        "version": PREDICTIONS_VERSION,
        "data": data,
        "eval": eval_cfg.to_dict(),
        "scenes": [
            {"index": i, "lanes": [lane.to_dict() for lane in lanes]}
            for i, lanes in zip(indices, preds)
        ],
    }


def write_json(path: Path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def evaluate_predictions(doc: dict, dataset: Dataset) -> EvalReport:
    """Re-evaluate a predictions document against the dataset's ground truth."""
    if doc.get("version") != PREDICTIONS_VERSION:
        raise ValueError(f"unsupported predictions version {doc.get('version')!r}")
    scenes = doc["scenes"]
    for s in scenes:
        if not 0 <= s["index"] < len(dataset):
            raise ValueError(f"prediction for scene {s['index']} outside the dataset of {len(dataset)}")
    preds = [[Lane3D.from_dict(d) for d in s["lanes"]] for s in scenes]
    gts = [dataset[s["index"]].lanes for s in scenes]
    return evaluate(preds, gts, EvalConfig.from_dict(doc["eval"]))


# -- training -----------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    step: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True) + "\n"


def _mean_breakdown(items: list[LossBreakdown]) -> dict:
    if not items:
        return {}
    keys = items[0].to_dict().keys()
    return {k: math.fsum(b.to_dict()[k] for b in items) / len(items) for k in keys}


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Dataset, out_dir=None):
        check_compatible(cfg.network, dataset)
        self.cfg = cfg
        self.dataset = dataset
        self.out = Path(out_dir) if out_dir is not None else None
        with default_dtype(TRAIN_DTYPE):
            self.model = GroupLaneNet(cfg.network, seed=cfg.seed)
        o = cfg.optimizer
        self.opt = AdamW(self.model.named_parameters(), o.lr, o.betas, o.weight_decay)
        self.state = TrainState()
        self._encodings: dict[int, list] = {}

    def encodings(self, index: int):
        if index not in self._encodings:
            self._encodings[index] = encode_labels(self.dataset[index].lanes, self.cfg.network.grid,
                                                   self.cfg.network.G)
        return self._encodings[index]

    def batch_loss(self, indices: list[int]):
        scenes = [self.dataset[i] for i in indices]
        vert, horiz = self.model(image_batch(scenes), _common_rig(scenes))
        return total_loss(vert, horiz, [self.encodings(i) for i in indices], self.cfg.network.grid,
                          matcher=self.cfg.matcher, weights=asdict(self.cfg.loss_weights),
                          vis_positive_only=self.cfg.vis_positive_only)

    def mean_loss(self, indices: list[int]) -> dict:
        """Loss breakdown averaged over batches of ``indices`` at the current weights."""
        parts = []
        with no_grad(), default_dtype(TRAIN_DTYPE):
            for start in range(0, len(indices), self.cfg.batch_size):
                parts.append(self.batch_loss(indices[start:start + self.cfg.batch_size])[1])
        return _mean_breakdown(parts)

    def train_step(self, indices: list[int]) -> LossBreakdown:
        with default_dtype(TRAIN_DTYPE):
            self.opt.zero_grad()
            loss, breakdown, _ = self.batch_loss(indices)
            loss.backward()
            self.opt.step()
        self.state.step += 1
        return breakdown

    def epoch_order(self, epoch: int) -> list[int]:
        idx = np.array(split_indices(self.dataset, self.cfg.train_split))
        rng = np.random.default_rng([self.cfg.seed, epoch])
        return idx[rng.permutation(len(idx))].tolist()

    def run_epoch(self, epoch: int) -> list[LossBreakdown]:
        order = self.epoch_order(epoch)
        out = []
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            if self.cfg.max_steps is not None and self.state.step >= self.cfg.max_steps:
                break
            out.append(self.train_step(order[start:start + bs]))
        return out

    def evaluate(self, split: str | None = None):
        indices = split_indices(self.dataset, split or self.cfg.eval_split)
        preds = predict(self.model, self.dataset, indices, self.cfg.batch_size,
                        self.cfg.exist_thr, self.cfg.vis_thr)
        report = evaluate(preds, [self.dataset[i].lanes for i in indices], self.cfg.eval)
        return report, indices, preds

    # -- persistence ----------------------------------------------------------
    def save(self) -> None:
        save_checkpoint(self.out / MODEL_FILE, self.model.state_dict())
        self.opt.save(self.out / OPTIM_FILE)
        (self.out / STATE_FILE).write_text(self.state.to_json())

    def resume(self) -> None:
        saved = RunConfig.from_json((self.out / CONFIG_FILE).read_text()).to_dict()
        current = self.cfg.to_dict()
        # the run length may be extended; everything else must match
        for key in RESUMABLE_KEYS:
            saved.pop(key)
            current.pop(key)
        if saved != current:
            raise ConfigError("resume config differs from the config of the interrupted run")
        (self.out / CONFIG_FILE).write_text(self.cfg.to_json())
        self.model.load_state_dict(load_checkpoint(self.out / MODEL_FILE))
        self.opt.load(self.out / OPTIM_FILE)
        self.state = TrainState(**json.loads((self.out / STATE_FILE).read_text()))
        for name in (METRICS_FILE, TIMINGS_FILE):
            path = self.out / name
            if path.exists():
                lines = [ln for ln in path.read_text().splitlines(keepends=True)
                         if json.loads(ln)["epoch"] < self.state.epoch]
                path.write_text("".join(lines))

    def fit(self, resume: bool = False) -> EvalReport:
        if self.out is None:
            raise ValueError("fit needs an output directory")
        self.out.mkdir(parents=True, exist_ok=True)
        if resume:
            self.resume()
        else:
            (self.out / CONFIG_FILE).write_text(self.cfg.to_json())
            for name in (METRICS_FILE, TIMINGS_FILE):
                (self.out / name).write_text("")
        report = None
        for epoch in range(self.state.epoch, self.cfg.epochs):
            t0 = time.perf_counter()
            losses = self.run_epoch(epoch)
            t1 = time.perf_counter()
            record = {"epoch": epoch, "step": self.state.step, "loss": _mean_breakdown(losses)}
            last = epoch == self.cfg.epochs - 1
            if last or (epoch + 1) % self.cfg.eval_every == 0:
                report, indices, preds = self.evaluate()
                record["val"] = {"f1": report.f1, "precision": report.precision,
                                 "recall": report.recall,
                                 "category_accuracy": report.category_accuracy}
            t2 = time.perf_counter()
            self.state.epoch = epoch + 1
            with open(self.out / METRICS_FILE, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            with open(self.out / TIMINGS_FILE, "a") as fh:
                fh.write(json.dumps({"epoch": epoch, "train_s": t1 - t0, "eval_s": t2 - t1,
                                     "wall_s": t2 - t0}, sort_keys=True) + "\n")
            self.save()
        if report is None:
            report, indices, preds = self.evaluate()
        write_json(self.out / REPORT_FILE, report.to_dict())
        write_json(self.out / PREDICTIONS_FILE,
                   predictions_document(indices, preds, self.cfg.eval, self.cfg.data))
        return report


def load_model(cfg: NetworkConfig, checkpoint) -> GroupLaneNet:
    with default_dtype(TRAIN_DTYPE):
        model = GroupLaneNet(cfg)
    model.load_state_dict(load_checkpoint(checkpoint))
    return model


def stage_timings(model: GroupLaneNet, dataset: Dataset, indices: list[int], batch_size: int,
                  exist_thr: float, vis_thr: float):
    timings = {name: 0.0 for name in STAGES + ("decode", "total")}
    preds = predict(model, dataset, indices, batch_size, exist_thr, vis_thr, timings)
    return preds, timings
