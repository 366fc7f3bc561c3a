"""SGD training, fine-tuning steps and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BatchStream, DatasetHandle
from .layers import ActivationHooks, Network

log = logging.getLogger(__name__)

EPOCH_LOG_HEADER = ("epoch", "lr", "train_loss", "test_error_percent")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    milestones: tuple[int, ...] = (15, 23)
    lr_decay: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    crop: bool = True
    flip: bool = True
    deterministic: bool = True
    eval_batch_size: int = 250

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch sizes >= 1")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.lr_decay <= 0:
            raise ValueError("learning rate, momentum, weight decay and decay factor must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(m <= epoch for m in self.milestones)

    @property
    def lowest_lr(self) -> float:
        return self.lr * self.lr_decay ** len(self.milestones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def desk_recipe(**overrides) -> TrainConfig:
    """Scaled-down WRN recipe used for desk-scale runs."""
    return TrainConfig(**{**dict(epochs=30, lr=0.1, milestones=(15, 23), lr_decay=0.2, momentum=0.9,
                                 weight_decay=5e-4), **overrides})


class SGD:
    """Heavy-ball SGD: ``buf = mu * buf + grad + wd * w``; ``w -= lr * buf``.

    Entries outside a parameter's ``update_mask`` are never written.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            d = p.grad
            if self.weight_decay and p.decay:
                d = d + self.weight_decay * p.data
            buf = self.buffers[i]
            buf = d.astype(p.data.dtype, copy=True) if buf is None else buf * self.momentum + d
            if p.update_mask is not None:
                buf *= p.update_mask
            self.buffers[i] = buf
            p.data -= (self.lr * buf).astype(p.data.dtype, copy=False)


def train_step(network: Network, opt: SGD, xb, yb, hooks: ActivationHooks | None = None) -> float:
    network.train()
    opt.zero_grad()
    logits = network(T.Tensor(xb, dtype=T.DEFAULT_DTYPE), hooks)
    loss = T.softmax_cross_entropy(logits, yb)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"loss became {value} (lr={opt.lr}, batch of {len(yb)})")
    T.backward(loss)
    opt.step()
    return value


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    test_error_percent: float


@dataclass
class TrainResult:
    network: Network
    log: list[EpochLog] = field(default_factory=list)

    @property
    def final_error(self) -> float:
        return self.log[-1].test_error_percent if self.log else math.nan


def train(network: Network, config: TrainConfig, data: DatasetHandle, evaluate_every: int = 1) -> TrainResult:
    """From-scratch training with a stepped LR schedule; evaluates the test split per epoch."""
    opt = SGD(network.parameters(), config.lr, config.momentum, config.weight_decay)
    stream = BatchStream(data.train_x, data.train_y, config.batch_size, seed=config.seed,
                         crop=config.crop, flip=config.flip)
    steps_per_epoch = math.ceil(len(data.train_y) / config.batch_size)
    result = TrainResult(network)
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        losses = []
        for step in range(steps_per_epoch):
            xb, yb = next(stream)
            try:
                losses.append(train_step(network, opt, xb, yb))
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, step {step}: {exc}") from exc
        err = math.nan
        if evaluate_every and ((epoch + 1) % evaluate_every == 0 or epoch + 1 == config.epochs):
            err = evaluate(network, data, "test", config.eval_batch_size)
        entry = EpochLog(epoch, opt.lr, float(np.mean(losses)), err)
        log.info("epoch %d lr %.4g loss %.4f test error %.2f%%", epoch, opt.lr, entry.train_loss, err)
        result.log.append(entry)
    return result


def predict(network: Network, x: np.ndarray, batch_size: int = 250) -> np.ndarray:
    network.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(network(T.Tensor(x[start : start + batch_size], dtype=T.DEFAULT_DTYPE)).data)
    return np.concatenate(out)


def correct_count(network: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 250) -> int:
    return int((predict(network, x, batch_size).argmax(axis=1) == y).sum())


def evaluate(network: Network, data: DatasetHandle, split: str = "test", batch_size: int = 250) -> float:
    """Eval-mode top-1 error in percent."""
    x, y = data.split(split)
    return 100.0 * (1.0 - correct_count(network, x, y, batch_size) / len(y))


def mean_loss(network: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 250) -> float:
    logits = predict(network, x, batch_size).astype(np.float64)
    return float(-T.log_softmax(logits)[np.arange(len(y)), y].mean())


def write_epoch_log(path, entries) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPOCH_LOG_HEADER)
        for e in entries:
            writer.writerow([e.epoch, repr(e.lr), f"{e.train_loss:.6f}", f"{e.test_error_percent:.4f}"])
    return path
