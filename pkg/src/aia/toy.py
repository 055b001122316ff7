"""Moving-square direction classification at desk scale.

Every clip shows one bright square translating in one of ``n_classes``
evenly spaced directions.  All classes draw their start position from the
same box, so a single frame carries no label information; only cross-frame
computation can recover the direction.  The backbone is a tiny per-frame 2d
conv stack with TSN-style consensus (average of per-frame logits), optionally
with an attention variant or a temporal shift mixed in.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import yaml

from . import autodiff as ad
from .attention import AttentionConfig, build_attention
from .autodiff import Module, Node
from .complexity import ArchSpec, Attention, Consensus, Conv, GlobalAvgPool, Linear as LinearSpec, ReLU, \
    TemporalShift as ShiftSpec
from .layers import Conv2d, Linear
from .tensor import Axis, Tensor
from .variants import canonical

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    """Motion parameters that cannot keep the square inside the frame."""


class TrainingDiverged(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MovingSquareDataset:
    clips: np.ndarray  # N x 1 x T x H x W, values in [0, 1]
    labels: np.ndarray  # N
    seed: int
    n_classes: int
    size: int
    speed: float
    noise: float

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "MovingSquareDataset":
        return dataclasses.replace(self, clips=self.clips[idx], labels=self.labels[idx])


def _coverage(pos: float, size: int, n: int) -> np.ndarray:
    """Fraction of each of ``n`` unit pixels covered by the interval [pos, pos+size)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, pos + size) - np.maximum(edges, pos), 0.0, 1.0)


def directions(n_classes: int) -> np.ndarray:
    """Unit (dy, dx) steps; class 0 moves right, then counter-clockwise."""
    ang = 2 * np.pi * np.arange(n_classes) / n_classes
    d = np.stack([-np.sin(ang), np.cos(ang)], axis=1)
    d[np.abs(d) < 1e-12] = 0.0
    return d


def start_box(frames: int, height: int, width: int, size: int, speed: float) -> tuple[float, float, float, float]:
    travel = speed * (frames - 1)
    y0, y1 = travel, height - size - travel
    x0, x1 = travel, width - size - travel
    if y1 < y0 or x1 < x0:
        raise GeometryError(
            f"a {size}px square moving {speed}px/frame for {frames} frames needs "
            f"{size + 2 * travel:g}px per side, frame is {height}x{width}")
    return y0, y1, x0, x1


def gen_moving_square(seed: int, n_clips: int, frames: int = 8, height: int = 32, width: int = 32,
                      n_classes: int = 4, noise: float = 0.1, size: int = 6, speed: float = 1.0
                      ) -> MovingSquareDataset:
    if n_classes not in (4, 8):
        raise ValueError(f"n_classes must be 4 or 8, got {n_classes}")
    if speed <= 0:
        raise GeometryError("speed must be positive: a static square has no direction")
    if n_clips < 1 or frames < 2:
        raise ValueError("need at least one clip of two frames")
    y0, y1, x0, x1 = start_box(frames, height, width, size, speed)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_clips) % n_classes)
    steps = directions(n_classes) * speed
    clips = np.empty((n_clips, 1, frames, height, width))
    starts = np.stack([rng.uniform(y0, y1, n_clips), rng.uniform(x0, x1, n_clips)], axis=1)
    for i in range(n_clips):
        dy, dx = steps[labels[i]]
        for t in range(frames):
            py, px = starts[i, 0] + dy * t, starts[i, 1] + dx * t
            clips[i, 0, t] = np.outer(_coverage(py, size, height), _coverage(px, size, width))
    if noise > 0:
        clips += noise * rng.standard_normal(clips.shape)
    np.clip(clips, 0.0, 1.0, out=clips)
    return MovingSquareDataset(clips, labels.astype(np.int64), seed, n_classes, size, speed, noise)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

MODES = ("plain", "attention", "shift")


class ToyBackbone(Module):
    """Three per-frame conv stages, per-frame pooling, linear head, frame averaging.

    ``attention`` is inserted after every stage listed in ``insert_after``;
    ``shift`` applies a temporal shift in front of stages 2 and 3.
    """

    def __init__(self, n_classes: int = 4, channels: Sequence[int] = (8, 16, 32), mode: str = "plain",
                 attention: AttentionConfig | str | None = None, insert_after: Sequence[int] = (1, 2),
                 shift_fraction: float = 0.125, pool: str = "max", rng=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        if isinstance(attention, str):
            attention = AttentionConfig(attention)
        if mode == "attention" and (attention is None or attention.variant == "none"):
            raise ValueError("attention mode needs a variant")
        self.mode = mode
        self.attention = attention if mode == "attention" else None
        self.insert_after = tuple(insert_after) if mode == "attention" else ()
        self.shift_fraction = shift_fraction
        if pool not in ("avg", "max"):
            raise ValueError(f"pool must be 'avg' or 'max', got {pool!r}")
        self.pool = pool
        self.channels = tuple(channels)
        c1, c2, c3 = self.channels
        self.stages = [Conv2d(1, c1, 3, 1, rng=rng, name="stage1"),
                       Conv2d(c1, c2, 3, 2, rng=rng, name="stage2"),
                       Conv2d(c2, c3, 3, 2, rng=rng, name="stage3")]
        self.attn = {s: build_attention(self.attention, self.channels[s - 1], rng) for s in self.insert_after}
        self.attn_list = [self.attn[s] for s in sorted(self.attn)]
        self.head = Linear(c3, n_classes, rng=rng, name="head", scale=0.1)

    def forward(self, x: Node) -> Node:
        h = x
        for s, conv in enumerate(self.stages, start=1):
            if self.mode == "shift" and s > 1:
                h = ad.temporal_shift(h, self.shift_fraction)
            h = ad.relu(conv(h))
            if s in self.attn:
                h = self.attn[s](h)
        if self.pool == "max":
            h = ad.pool(ad.pool(h, Axis.H, "max"), Axis.W, "max")
        else:
            h = ad.avgpool_global(h, (Axis.H, Axis.W))
        logits = self.head(h)  # per frame: N x K x T x 1 x 1
        return ad.avgpool_global(logits, (Axis.T,))

    def logits(self, clips: np.ndarray) -> np.ndarray:
        out = self.forward(ad.constant(Tensor(clips)))
        return out.data.reshape(out.shape[0], -1)

    def arch_spec(self, frames: int, height: int, width: int) -> ArchSpec:
        c1, c2, c3 = self.channels
        layers: list = []
        c_prev = 1
        for s, (c, stride) in enumerate(zip(self.channels, (1, 2, 2)), start=1):
            if self.mode == "shift" and s > 1:
                layers.append(ShiftSpec(f"stage{s}.shift", self.shift_fraction))
            layers += [Conv(f"stage{s}", c_prev, c, (1, 3, 3), stride, bias=True), ReLU(f"stage{s}.relu")]
            if s in self.attn:
                layers.append(Attention(f"stage{s}.attn", self.attention))
            c_prev = c
        n_classes = self.head.weight.shape[0]
        layers += [GlobalAvgPool("pool"), LinearSpec("head", c3, n_classes), Consensus("consensus")]
        return ArchSpec(f"toy-{self.mode}", frames, (height, width), 1, n_classes, tuple(layers))


def build_model(variant: str, n_classes: int = 4, seed: int = 0, **kwargs) -> ToyBackbone:
    """``variant`` is ``plain``/``none``, ``shift``/``tsm`` or an attention name."""
    rng = np.random.default_rng(seed)
    v = variant.strip().lower()
    if v in ("plain", "none"):
        return ToyBackbone(n_classes, mode="plain", rng=rng, **kwargs)
    if v in ("shift", "tsm", "temporal_shift"):
        return ToyBackbone(n_classes, mode="shift", rng=rng, **kwargs)
    return ToyBackbone(n_classes, mode="attention", attention=AttentionConfig(canonical(v)), rng=rng, **kwargs)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (5,)
    lr_decay: float = 0.1
    seed: int = 0
    n_train: int = 500
    n_val: int = 200
    frames: int = 8
    height: int = 32
    width: int = 32
    n_classes: int = 4
    square: int = 6
    speed: float = 1.0
    noise: float = 0.1
    variant: str = "c"
    insert_after: tuple[int, ...] = (1, 2)
    channels: tuple[int, ...] = (8, 16, 32)
    pool: str = "max"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "n_train", "n_val", "frames", "height", "width", "square"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        # lr == 0 is accepted as a frozen run that never steps the optimizer
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum and weight_decay must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        object.__setattr__(self, "lr_decay_epochs", tuple(self.lr_decay_epochs))
        object.__setattr__(self, "insert_after", tuple(self.insert_after))
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.channels) != 3:
            raise ConfigError("channels lists the widths of exactly three stages")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(epoch >= e for e in self.lr_decay_epochs)

    def datasets(self) -> tuple[MovingSquareDataset, MovingSquareDataset]:
        kw = dict(frames=self.frames, height=self.height, width=self.width, n_classes=self.n_classes,
                  noise=self.noise, size=self.square, speed=self.speed)
        train = gen_moving_square(self.seed, self.n_train, **kw)
        val = gen_moving_square(self.seed + 1_000_003, self.n_val, **kw)
        return train, val

    def build_model(self, variant: str | None = None) -> ToyBackbone:
        return build_model(variant or self.variant, self.n_classes, self.seed,
                           insert_after=self.insert_after, channels=self.channels, pool=self.pool)


CONFIG_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def load_config(text: str, source: str = "<config>") -> TrainConfig:
    """Parse a YAML mapping of :class:`TrainConfig` fields.

    Unknown keys and bad values are reported with the offending line.
    """
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"{source}:{mark.line + 1}:{mark.column + 1}: {exc.problem}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    lines = {}
    if node is not None and isinstance(node, yaml.MappingNode):
        lines = {k.value: k.start_mark.line + 1 for k, _ in node.value}
    for key in data:
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"{source}:{lines.get(key, '?')}: unknown key {key!r}; "
                              f"valid keys: {', '.join(sorted(CONFIG_FIELDS))}")
    try:
        cfg = TrainConfig(**data)
        canonical(cfg.variant) if cfg.variant not in ("plain", "shift", "tsm") else None
        return cfg
    except (ConfigError, ValueError, TypeError) as exc:
        key = next((k for k in data if k in str(exc)), None)
        where = f":{lines[key]}" if key in lines else ""
        raise ConfigError(f"{source}{where}: {exc}") from None


def config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_top1: float


@dataclass
class History:
    epochs: list[EpochMetrics] = field(default_factory=list)
    first_batch_loss: float = math.nan
    train_top1: float = math.nan

    @property
    def final_val_top1(self) -> float:
        return self.epochs[-1].val_top1 if self.epochs else math.nan


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_step(model: ToyBackbone, clips: np.ndarray, labels: np.ndarray, lr: float, cfg: TrainConfig) -> float:
    logits = model(ad.constant(Tensor(clips)))
    loss = ad.cross_entropy(logits, labels)
    value = float(loss.data[0])
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at lr={lr}")
    ad.backward(loss)
    params = model.params()
    if lr > 0:
        ad.sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
    else:
        for p in params:
            p.zero_grad()
    return value


def train(model: ToyBackbone, dataset: MovingSquareDataset, config: TrainConfig,
          val: MovingSquareDataset | None = None) -> History:
    """SGD with momentum on mean cross-entropy; deterministic given ``config.seed``."""
    hist = History()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        model.train()
        rng = np.random.default_rng([config.seed, epoch])
        losses, sizes = [], []
        for step, idx in enumerate(_batches(len(dataset), config.batch_size, rng)):
            try:
                value = train_step(model, dataset.clips[idx], dataset.labels[idx], lr, config)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from None
            if epoch == 0 and step == 0:
                hist.first_batch_loss = value
            losses.append(value * len(idx))
            sizes.append(len(idx))
        train_loss = float(np.sum(losses) / np.sum(sizes))
        val_top1 = evaluate(model, val) if val is not None else math.nan
        hist.epochs.append(EpochMetrics(epoch, train_loss, val_top1))
        log.info("epoch %d lr %.4g loss %.4f val %.3f", epoch, lr, train_loss, val_top1)
    return hist


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return math.nan
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: ToyBackbone, dataset: MovingSquareDataset, batch_size: int = 50) -> float:
    model.eval()
    logits = np.concatenate([model.logits(dataset.clips[i:i + batch_size])
                             for i in range(0, len(dataset), batch_size)])
    return top1(logits, dataset.labels)


# ---------------------------------------------------------------------------
# single-frame probe
# ---------------------------------------------------------------------------

def frame_probe_accuracy(train: MovingSquareDataset, val: MovingSquareDataset, frame: int = 0,
                         steps: int = 300, lr: float = 0.5, l2: float = 1e-3) -> float:
    """Softmax regression on the raw pixels of one frame; returns val top-1."""
    def feats(ds):
        x = ds.clips[:, 0, frame].reshape(len(ds), -1)
        return np.hstack([x, np.ones((len(ds), 1))])

    xtr, xva = feats(train), feats(val)
    k = train.n_classes
    w = np.zeros((xtr.shape[1], k))
    onehot = np.eye(k)[train.labels]
    for _ in range(steps):
        z = xtr @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * (xtr.T @ (p - onehot) / len(xtr) + l2 * w)
    return top1(xva @ w, val.labels)
