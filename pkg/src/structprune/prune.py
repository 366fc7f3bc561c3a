"""Sequential prune-and-tune: fine-tune, rank, remove the single worst channel, repeat."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .accounting import count_macs
from .arch import ProfileVector, extract_profile
from .data import BatchStream, DatasetHandle
from .layers import ActivationHooks, Network, build_network
from .saliency import FisherAccumulator, SaliencyRecord, l1_records, rank_channels
from .train import SGD, TrainConfig, TrainResult, evaluate, train, train_step

log = logging.getLogger(__name__)

TRAJECTORY_HEADER = ("event", "channels_pruned", "params", "macs", "test_error_percent", "seconds")
METHODS = ("l1", "fisher")


class PruneExhaustedError(RuntimeError):
    """Every block is down to its last channel."""


@dataclass
class PruneConfig:
    method: str = "fisher"
    steps_between_prunes: int = 100
    fine_tune_lr: float = 0.004
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    crop: bool = True
    flip: bool = True
    max_events: int | None = None
    target_params: int | None = None
    target_fraction: float | None = None
    eval_batch_size: int = 250

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.steps_between_prunes < 1:
            raise ValueError("steps_between_prunes must be >= 1")
        if self.fine_tune_lr <= 0:
            raise ValueError("fine_tune_lr must be positive")
        if self.max_events is None and self.target_params is None and self.target_fraction is None:
            raise ValueError("set at least one stop condition (max_events, target_params, target_fraction)")

    @classmethod
    def from_train_config(cls, cfg: TrainConfig, **kw) -> "PruneConfig":
        """Fine-tune at the lowest learning rate the from-scratch schedule reaches."""
        base = dict(fine_tune_lr=cfg.lowest_lr, batch_size=cfg.batch_size, momentum=cfg.momentum,
                    weight_decay=cfg.weight_decay, seed=cfg.seed, crop=cfg.crop, flip=cfg.flip)
        return cls(**{**base, **kw})


@dataclass(frozen=True)
class TrajectoryEntry:
    event: int
    channels_pruned: int
    params: int
    macs: int
    test_error_percent: float
    seconds: float
    n_m: tuple[int, ...] = ()
    decision: SaliencyRecord | None = None


@dataclass
class Trajectory:
    method: str
    entries: list[TrajectoryEntry] = field(default_factory=list)
    status: str = "running"

    def __len__(self):
        return len(self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        for e in self.entries:
            writer.writerow([e.event, e.channels_pruned, e.params, e.macs,
                             f"{e.test_error_percent:.4f}", f"{e.seconds:.3f}"])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8", newline="")
        return path

    @classmethod
    def from_csv(cls, text: str, method: str = "unknown") -> "Trajectory":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != TRAJECTORY_HEADER:
            raise ValueError("not a trajectory CSV (header mismatch)")
        entries = [
            TrajectoryEntry(int(r[0]), int(r[1]), int(r[2]), int(r[3]), float(r[4]), float(r[5]))
            for r in rows[1:]
        ]
        return cls(method, entries, "loaded")


@dataclass
class PruneResult:
    network: Network
    trajectory: Trajectory

    @property
    def status(self) -> str:
        return self.trajectory.status


def saliency_records(network: Network, method: str, acc: FisherAccumulator | None = None) -> list[SaliencyRecord]:
    if method == "l1":
        return l1_records(network)
    if acc is None:
        raise ValueError("Fisher saliency needs an accumulator")
    return acc.finalize(network.masks())


def prune_once(network: Network, records) -> SaliencyRecord:
    """Mask the lowest-ranked channel and return that decision."""
    ranked = rank_channels(records, network.masks())
    if not ranked:
        raise PruneExhaustedError("no block has more than one active channel")
    choice = ranked[0]
    network.blocks[choice.block].apply_mask(choice.channel)
    return choice


def _stop_reached(cfg: PruneConfig, events: int, entry: TrajectoryEntry, total_slots: int) -> bool:
    if cfg.max_events is not None and events >= cfg.max_events:
        return True
    if cfg.target_params is not None and entry.params <= cfg.target_params:
        return True
    if cfg.target_fraction is not None and entry.channels_pruned >= math.ceil(cfg.target_fraction * total_slots):
        return True
    return False


def prune_and_tune(
    network: Network,
    config: PruneConfig,
    data: DatasetHandle,
    evaluator: Callable[[Network], float] | None = None,
    on_event: Callable[[Network, TrajectoryEntry], None] | None = None,
) -> PruneResult:
    """Run the prune loop in place on ``network``.

    Entry 0 is the network as given. Each later entry is recorded after the
    fine-tune window that follows a removal, i.e. just before the next one.
    """
    if evaluator is None:
        def evaluator(net):
            return evaluate(net, data, "test", config.eval_batch_size)

    opt = SGD(network.parameters(), config.fine_tune_lr, config.momentum, config.weight_decay)
    stream = BatchStream(data.train_x, data.train_y, config.batch_size, seed=config.seed,
                         crop=config.crop, flip=config.flip)
    acc = FisherAccumulator()
    fisher = config.method == "fisher"
    total_slots = sum(b.slots for b in network.blocks)
    pruned_at_start = sum(b.slots - b.mask.active for b in network.blocks)
    t0 = time.perf_counter()

    def record(event: int, decision=None) -> TrajectoryEntry:
        profile = extract_profile(network)
        entry = TrajectoryEntry(
            event=event,
            channels_pruned=profile.channels_removed - pruned_at_start,
            params=network.num_params(),
            macs=count_macs(profile.descriptor()).macs,
            test_error_percent=float(evaluator(network)),
            seconds=time.perf_counter() - t0,
            n_m=profile.n_m,
            decision=decision,
        )
        if on_event is not None:
            on_event(network, entry)
        return entry

    def window():
        for _ in range(config.steps_between_prunes):
            xb, yb = next(stream)
            hooks = ActivationHooks() if fisher else None
            train_step(network, opt, xb, yb, hooks)
            if fisher:
                for block, a, g in hooks.pairs():
                    acc.update(block, a, g)

    traj = Trajectory(config.method, [record(0)])
    window()
    events = 0
    while not _stop_reached(config, events, traj.entries[-1], total_slots):
        try:
            decision = prune_once(network, saliency_records(network, config.method, acc))
        except PruneExhaustedError:
            traj.status = "exhausted"
            break
        events += 1
        acc.reset()
        window()
        entry = record(events, decision)
        traj.entries.append(entry)
        log.info("event %d: pruned block %d channel %d (delta %.3g); params %d, error %.2f%%",
                 events, decision.block, decision.channel, decision.delta_c, entry.params,
                 entry.test_error_percent)
    else:
        traj.status = "completed"
    return PruneResult(network, traj)


def scratch_train_from_profile(profile: ProfileVector, config: TrainConfig, data: DatasetHandle,
                               seed: int | None = None) -> TrainResult:
    """Build the compact architecture a profile describes, re-initialise, and train it anew."""
    network = build_network(profile.descriptor(), seed=config.seed if seed is None else seed)
    return train(network, config, data)
