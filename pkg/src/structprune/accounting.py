"""Exact parameter and MAC counts from a descriptor.

This walks the descriptor on its own and never touches an instantiated
network, so the counts can be checked against the parameters a built
network actually holds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .arch import ArchDescriptor

COST_SCHEMA_VERSION = "structprune.cost/1"


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str  # conv | bn | linear
    params: int
    macs: int
    shape: tuple[int, ...]
    out_hw: tuple[int, int] | None = None


@dataclass
class CostReport:
    name: str | None
    params: int
    macs: int
    resolution: int
    breakdown: list[LayerCost]

    def to_dict(self) -> dict:
        return {
            "schema": COST_SCHEMA_VERSION,
            "name": self.name,
            "params": self.params,
            "macs": self.macs,
            "resolution": self.resolution,
            "breakdown": [
                {**asdict(layer), "shape": list(layer.shape),
                 "out_hw": None if layer.out_hw is None else list(layer.out_hw)}
                for layer in self.breakdown
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _out(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


class _Walker:
    def __init__(self):
        self.layers: list[LayerCost] = []

    def conv(self, name, cin, cout, k, stride, pad, hw):
        h, w = _out(hw[0], k, stride, pad), _out(hw[1], k, stride, pad)
        params = k * k * cin * cout
        self.layers.append(LayerCost(name, "conv", params, params * h * w, (cout, cin, k, k), (h, w)))
        return h, w

    def bn(self, name, c):
        self.layers.append(LayerCost(name, "bn", 2 * c, 0, (c,)))

    def linear(self, name, fin, fout):
        self.layers.append(LayerCost(name, "linear", fin * fout + fout, fin * fout, (fout, fin)))


def layer_costs(desc: ArchDescriptor) -> list[LayerCost]:
    """Every parameterised layer of ``desc`` with its cost at ``desc.resolution``."""
    w = _Walker()
    hw = (desc.resolution, desc.resolution)
    if desc.family == "densenet-bc":
        hw = w.conv("stem.conv", 3, desc.stem_channels, 3, 1, 1, hw)
        for b in desc.profile:
            p = f"blocks.{b.block}"
            w.bn(p + ".bn1", b.n_i)
            hw = w.conv(p + ".conv1", b.n_i, b.n_m, 1, 1, 0, hw)
            w.bn(p + ".bn2", b.n_m)
            hw = w.conv(p + ".conv2", b.n_m, desc.growth_rate, 3, 1, 1, hw)
            if desc.is_stage_end(b.block) and b.block != len(desc.profile) - 1:
                c = desc.block_out(b.block)
                t = f"transitions.{b.block}"
                w.bn(t + ".bn", c)
                hw = w.conv(t + ".conv", c, desc.transition_out(c), 1, 1, 0, hw)
                hw = (hw[0] // 2, hw[1] // 2)
        w.bn("head.bn", desc.final_channels)
    else:
        if desc.family == "resnet":
            hw = w.conv("stem.conv", 3, desc.stem_channels, 7, 2, 3, hw)
            w.bn("stem.bn", desc.stem_channels)
            hw = (_out(hw[0], 3, 2, 1), _out(hw[1], 3, 2, 1))
        else:
            hw = w.conv("stem.conv", 3, desc.stem_channels, 3, 1, 1, hw)
            w.bn("stem.bn", desc.stem_channels)
        for b in desc.profile:
            p = f"blocks.{b.block}"
            out = desc.block_out(b.block)
            mid = w.conv(p + ".conv1", b.n_i, b.n_m, 3, b.stride, 1, hw)
            w.bn(p + ".bn_mid", b.n_m)
            w.conv(p + ".conv2", b.n_m, out, 3, 1, 1, mid)
            w.bn(p + ".bn_out", out)
            if b.stride > 1 or b.n_i != out:
                w.conv(p + ".shortcut.conv", b.n_i, out, 1, b.stride, 0, hw)
                w.bn(p + ".shortcut.bn", out)
            hw = mid
    w.linear("head.fc", desc.final_channels, desc.classes)
    return w.layers


def _report(desc: ArchDescriptor) -> CostReport:
    layers = layer_costs(desc)
    return CostReport(
        desc.name, sum(l.params for l in layers), sum(l.macs for l in layers), desc.resolution, layers
    )


def count_params(desc: ArchDescriptor) -> CostReport:
    return _report(desc)


def count_macs(desc: ArchDescriptor) -> CostReport:
    return _report(desc)


@dataclass(frozen=True)
class BudgetSnapshot:
    budget: float
    reachable: bool
    entry: object | None  # trajectory entry, or None when unreachable

    @property
    def params(self) -> int | None:
        return None if self.entry is None else self.entry.params


def budget_snapshot(trajectory, budgets) -> list[BudgetSnapshot]:
    """For each parameter budget, the largest trajectory entry that fits under it."""
    entries = list(getattr(trajectory, "entries", trajectory))
    if not entries:
        raise ValueError("trajectory is empty")
    out = []
    for budget in budgets:
        fitting = [e for e in entries if e.params <= budget]
        if not fitting:
            out.append(BudgetSnapshot(budget, False, None))
            continue
        best = max(fitting, key=lambda e: (e.params, -e.event))
        out.append(BudgetSnapshot(budget, True, best))
    return out


