"""Desk-scale pipeline: train a small WRN, Fisher-prune it, compare against scratch and reduced nets."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .accounting import count_macs, count_params
from .arch import ArchDescriptor, ProfileVector, extract_profile, make_wrn
from .data import DatasetHandle, balanced_subset, load_cifar10, make_synthetic
from .layers import ActivationHooks, Network, build_network
from .prune import PruneConfig, PruneResult, prune_and_tune, scratch_train_from_profile
from .saliency import FisherAccumulator, SaliencyRecord
from .train import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

COMPARISON_HEADER = ("kind", "network", "event", "params", "macs", "test_error_percent")


@dataclass
class DeskConfig:
    depth: int = 16
    width: float = 1
    train_size: int = 5000
    test_per_class: int = 100
    epochs: int = 6
    milestones: tuple[int, ...] = (3, 5)
    batch_size: int = 64
    prune_fraction: float = 0.3
    steps_between_prunes: int = 16
    seed: int = 0
    cifar_root: str | None = None

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs if epochs is None else epochs, batch_size=self.batch_size,
                           milestones=self.milestones, seed=self.seed)

    def prune_config(self) -> PruneConfig:
        return PruneConfig.from_train_config(self.train_config(), method="fisher",
                                             steps_between_prunes=self.steps_between_prunes,
                                             target_fraction=self.prune_fraction)


def desk_data(cfg: DeskConfig) -> DatasetHandle:
    """The seeded CIFAR-10 subset when a directory is given, otherwise the synthetic stand-in."""
    if cfg.cifar_root:
        return balanced_subset(load_cifar10(cfg.cifar_root), cfg.train_size, seed=cfg.seed)
    return make_synthetic(10, cfg.train_size // 10, 32, seed=cfg.seed, test_per_class=cfg.test_per_class)


def train_desk(cfg: DeskConfig, data: DatasetHandle) -> TrainResult:
    net = build_network(make_wrn(cfg.depth, cfg.width), seed=cfg.seed)
    return train(net, cfg.train_config(), data)


def prune_desk(network: Network, cfg: DeskConfig, data: DatasetHandle) -> PruneResult:
    return prune_and_tune(network, cfg.prune_config(), data)


def held_out_fisher(network: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 100) -> list[SaliencyRecord]:
    """Fisher saliency from eval-mode forwards over a fixed set, without touching the weights.

    The loss is summed, not averaged, so each example contributes its own gradient.
    """
    network.eval()
    acc = FisherAccumulator()
    for start in range(0, len(y), batch_size):
        hooks = ActivationHooks()
        xb = T.Tensor(x[start : start + batch_size], dtype=T.DEFAULT_DTYPE)
        yb = y[start : start + batch_size]
        loss = T.softmax_cross_entropy(network(xb, hooks), yb) * float(len(yb))
        T.backward(loss)
        for block, a, g in hooks.pairs():
            acc.update(block, a, g)
    for p in network.parameters():
        p.grad = None
    return acc.finalize(network.masks())


def matched_reduced(target_params: int, depth: int = 16, width: float = 1) -> ArchDescriptor:
    """The WRN bottleneck z (on a 1/64 grid) whose param count is closest to ``target_params``."""
    candidates = [make_wrn(depth, width, k / 64) for k in range(1, 65)]
    return min(candidates, key=lambda d: abs(count_params(d).params - target_params))


def comparison_rows(pruned: PruneResult, scratch: TrainResult, reduced: TrainResult) -> list[dict]:
    rows = [
        {"kind": "pruned", "network": "fisher-prune-and-tune", "event": e.event, "params": e.params,
         "macs": e.macs, "test_error_percent": e.test_error_percent}
        for e in pruned.trajectory.entries
    ]
    for kind, res in (("scratch", scratch), ("reduced", reduced)):
        desc = extract_profile(res.network).descriptor()
        rows.append({"kind": kind, "network": res.network.arch.name or kind, "event": "",
                     "params": res.network.num_params(), "macs": count_macs(desc).macs,
                     "test_error_percent": res.final_error})
    return rows


def write_comparison(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARISON_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def run_comparison(cfg: DeskConfig, data: DatasetHandle, pruned: PruneResult) -> list[dict]:
    """Train the pruned profile from scratch and a param-matched reduced WRN, same schedule."""
    profile: ProfileVector = extract_profile(pruned.network)
    scratch = scratch_train_from_profile(profile, cfg.train_config(), data)
    reduced_desc = matched_reduced(pruned.network.num_params(), cfg.depth, cfg.width)
    log.info("reduced network %s with %d params", reduced_desc.name, count_params(reduced_desc).params)
    reduced = train(build_network(reduced_desc, seed=cfg.seed), cfg.train_config(), data)
    return comparison_rows(pruned, scratch, reduced)
