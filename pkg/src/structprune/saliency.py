"""Channel saliencies: filter l1 norms and the Fisher loss-change estimate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IntegrityError(RuntimeError):
    """An active channel has no saliency record."""


class EmptyAccumulatorError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class SaliencyRecord:
    block: int
    channel: int
    delta_c: float


def l1_saliency(weight) -> np.ndarray:
    """Sum of absolute weights of each output filter of a (Co, Ci, K, K) weight."""
    w = np.asarray(getattr(weight, "data", weight))
    if w.ndim != 4:
        raise ValueError(f"l1_saliency expects a 4-D weight, got shape {w.shape}")
    return np.abs(w).reshape(w.shape[0], -1).sum(axis=1, dtype=np.float64)


def l1_records(network) -> list[SaliencyRecord]:
    """l1 saliency of every active intermediate channel, from each block's first conv."""
    records = []
    for block in network.blocks:
        sal = l1_saliency(block.conv1.weight)
        for c in block.mask.active_indices():
            records.append(SaliencyRecord(block.mask.block, int(c), float(sal[c])))
    return records


class FisherAccumulator:
    """Running per-channel sums of squared spatial inner products <A_n, g_n>."""

    def __init__(self):
        self.sums: dict[int, np.ndarray] = {}
        self.count = 0
        self._counted: dict[int, int] = {}

    def reset(self) -> None:
        self.sums.clear()
        self._counted.clear()
        self.count = 0

    def update(self, block: int, activation, grad) -> None:
        a = np.asarray(activation, dtype=np.float64)
        g = np.asarray(grad, dtype=np.float64)
        if a.shape != g.shape or a.ndim != 4:
            raise ValueError(f"activation {a.shape} and gradient {g.shape} must be identical 4-D shapes")
        inner = np.einsum("nchw,nchw->nc", a, g)
        contrib = (inner**2).sum(axis=0)
        if block in self.sums:
            if self.sums[block].shape != contrib.shape:
                raise ValueError(f"block {block}: channel count changed without a reset")
            self.sums[block] += contrib
        else:
            self.sums[block] = contrib
        self._counted[block] = self._counted.get(block, 0) + a.shape[0]
        self.count = max(self._counted.values())

    def examples(self, block: int) -> int:
        return self._counted.get(block, 0)

    def finalize(self, masks=None) -> list[SaliencyRecord]:
        """Delta_c per channel, dividing each block's sum by twice its example count.

        With ``masks`` given, only active channels are reported.
        """
        if not self.sums:
            raise EmptyAccumulatorError("no activations accumulated since the last reset")
        keep = {m.block: m.keep for m in masks} if masks is not None else {}
        records = []
        for block in sorted(self.sums):
            delta = self.sums[block] / (2.0 * self._counted[block])
            active = keep.get(block)
            for c, d in enumerate(delta):
                if active is None or active[c]:
                    records.append(SaliencyRecord(block, c, float(d)))
        return records


def fisher_update(acc: FisherAccumulator, block: int, activation, grad) -> FisherAccumulator:
    acc.update(block, activation, grad)
    return acc


def fisher_finalize(acc: FisherAccumulator, masks=None) -> list[SaliencyRecord]:
    return acc.finalize(masks)


def rank_channels(records, masks) -> list[SaliencyRecord]:
    """Ascending Delta_c; ties go to the lower (block, channel).

    Blocks down to their last channel are left out. Every active channel
    in ``masks`` must have exactly one record.
    """
    by_key: dict[tuple[int, int], SaliencyRecord] = {}
    for r in records:
        key = (r.block, r.channel)
        if key in by_key:
            raise IntegrityError(f"duplicate record for block {r.block}, channel {r.channel}")
        by_key[key] = r
    ranked = []
    for m in masks:
        for c in m.active_indices():
            r = by_key.get((m.block, int(c)))
            if r is None:
                raise IntegrityError(f"no saliency record for active channel {c} of block {m.block}")
            if m.active > 1:
                ranked.append(r)
    ranked.sort(key=lambda r: (r.delta_c, r.block, r.channel))
    return ranked
