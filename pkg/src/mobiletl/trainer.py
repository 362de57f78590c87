"""Optimizers, LR schedule, dataset ingestion, and the training loop."""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .model import FormatError, Model
from .policy import TrainPolicy
from .profiler import profile_model
from .tensor import Tape
from .layers import softmax_cross_entropy


@dataclass
class OptimizerCfg:
    kind: str = "adam"            # "sgd" | "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"      # "constant" | "cosine"
    total_steps: int = 1000
    lr_min: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must be in (0, 1)")


def cosine_lr(step: int, cfg: OptimizerCfg) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.schedule == "constant":
        return cfg.lr
    frac = step / cfg.total_steps
    return cfg.lr_min + (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * frac)) / 2


class OptimizerState:
    def __init__(self):
        self.step = 0
        self.m: dict = {}
        self.v: dict = {}


def optimizer_step(params: dict, grads: dict, state: OptimizerState,
                   cfg: OptimizerCfg, lr: float | None = None) -> None:
    """In-place update of trainable params; untouched keys stay frozen."""
    lr = cfg.lr if lr is None else lr
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise RuntimeError(f"grad shape {g.shape} != param {p.shape} ({name})")
        if cfg.kind == "sgd":
            if cfg.momentum:
                buf = state.m.setdefault(name, np.zeros_like(p))
                buf *= cfg.momentum
                buf += g
                g = buf
            p -= (lr * g).astype(p.dtype)
        else:
            m = state.m.setdefault(name, np.zeros_like(p))
            v = state.v.setdefault(name, np.zeros_like(p))
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** state.step)
            vhat = v / (1 - cfg.beta2 ** state.step)
            p -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# datasets: TLDS binary format and the synthetic two-blob generator

_TLDS_MAGIC = b"TLDS"


@dataclass
class DatasetHandle:
    images: np.ndarray   # [N, C, H, W] float32
    labels: np.ndarray   # [N] int

    @property
    def count(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.count else 0


def synthetic_blobs(n: int, classes: int, seed: int, channels: int = 3,
                    size: int = 12) -> DatasetHandle:
    """Gaussian-blob image classes; class identity lives in the channel mix
    and blob position, so it survives global average pooling."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    labels = rng.integers(0, classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for i in range(n):
        k = labels[i]
        cy = size * (0.3 + 0.4 * (k % 2))
        cx = size * (0.3 + 0.4 * ((k // 2) % 2))
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 4) ** 2))
        chan_w = np.zeros(channels, dtype=np.float32)
        chan_w[k % channels] = 2.0
        chan_w[(k + 1) % channels] = -1.0
        img = chan_w[:, None, None] * blob[None]
        img += rng.normal(0, 0.05, size=img.shape)
        images[i] = img
    return DatasetHandle(images, labels.astype(np.int64))


def save_dataset(ds: DatasetHandle, path: str) -> None:
    n, c, h, w = ds.images.shape
    with open(path, "wb") as f:
        f.write(_TLDS_MAGIC)
        f.write(struct.pack("<IIIIII", 1, n, c, h, w, ds.num_classes))
        for i in range(n):
            f.write(struct.pack("<H", int(ds.labels[i])))
            f.write(ds.images[i].astype("<f4").tobytes())


def load_dataset(path: str) -> DatasetHandle:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _TLDS_MAGIC:
            raise FormatError("bad dataset magic")
        header = f.read(24)
        if len(header) != 24:
            raise FormatError("truncated dataset header")
        version, n, c, h, w, _classes = struct.unpack("<IIIIII", header)
        if version != 1:
            raise FormatError(f"unsupported dataset version {version}")
        images = np.empty((n, c, h, w), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        rec = 2 + c * h * w * 4
        for i in range(n):
            raw = f.read(rec)
            if len(raw) != rec:
                raise FormatError("truncated dataset record")
            (labels[i],) = struct.unpack("<H", raw[:2])
            images[i] = np.frombuffer(raw[2:], dtype="<f4").reshape(c, h, w)
    return DatasetHandle(images, labels)


def split_train_eval(ds: DatasetHandle, seed: int, eval_frac: float = 0.2):
    order = np.random.default_rng(seed).permutation(ds.count)
    n_eval = int(ds.count * eval_frac)
    ev, tr = order[:n_eval], order[n_eval:]
    return (DatasetHandle(ds.images[tr], ds.labels[tr]),
            DatasetHandle(ds.images[ev], ds.labels[ev]))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    final_accuracy: float = 0.0
    peak_tape_bytes: int = 0
    predicted_tape_bytes: int = 0
    wall_time_s: float = 0.0
    steps: int = 0


def evaluate(model: Model, ds: DatasetHandle, batch_size: int = 8) -> float:
    correct = 0
    for i in range(0, ds.count, batch_size):
        logits = model.forward(ds.images[i:i + batch_size], None, training=False)
        correct += int((logits.data.argmax(axis=1)
                        == ds.labels[i:i + batch_size]).sum())
    return correct / max(ds.count, 1)


def train(model: Model, ds: DatasetHandle, cfg: OptimizerCfg,
          policy: TrainPolicy, seed: int = 0, steps: int = 100,
          batch_size: int = 8, eval_frac: float = 0.2) -> TrainReport:
    """Deterministic training run; records peak tape bytes every step."""
    if ds.count == 0:
        raise ValueError("dataset is empty")
    if model.spec.num_classes < ds.num_classes:
        raise ValueError("dataset classes exceed model head width")
    train_ds, eval_ds = split_train_eval(ds, seed, eval_frac)
    rng = np.random.default_rng(seed + 1)
    state = OptimizerState()
    frozen_before = {
        name: p.copy() for b in model.blocks if b.frozen
        for layer in b.layers for name, p in layer.params().items()}
    shape = (batch_size,) + tuple(ds.images.shape[1:])
    predicted = profile_model(model.spec, policy, input_shape=shape,
                              include_loss=True).total("saved_act_bytes")
    report = TrainReport(predicted_tape_bytes=predicted)
    t0 = time.perf_counter()
    order = np.array([], dtype=np.int64)
    pos = 0
    for step in range(steps):
        if pos + batch_size > len(order):
            order = rng.permutation(train_ds.count)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        tape = Tape()
        logits = model.forward(train_ds.images[idx], tape, training=True)
        loss = softmax_cross_entropy(logits, train_ds.labels[idx], tape)
        report.peak_tape_bytes = max(report.peak_tape_bytes, tape.saved_bytes())
        if not np.isfinite(loss.data[0]):
            raise RuntimeError(f"loss diverged to {loss.data[0]} at step {step}")
        grads = tape.backward(loss)
        lr = cosine_lr(min(step, cfg.total_steps), cfg)
        optimizer_step(model.trainable_params(), grads, state, cfg, lr)
        report.step_losses.append(float(loss.data[0]))
    report.wall_time_s = time.perf_counter() - t0
    report.steps = steps
    report.final_accuracy = evaluate(model, eval_ds if eval_ds.count else train_ds,
                                     batch_size)
    for name, p in frozen_before.items():
        now = model.params()[name]
        if not np.array_equal(now, p):
            raise RuntimeError(f"frozen parameter {name} changed during training")
    return report
