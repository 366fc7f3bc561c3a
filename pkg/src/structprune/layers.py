"""Modules, maskable blocks, and networks built from descriptors.

Pruning happens at one place per block: the intermediate activation after
``bn_mid`` (or ``bn2`` for dense bottlenecks) and its ReLU. A masked channel
is multiplied by zero there, so it contributes nothing forward and receives
no gradient. ``compact`` then deletes the dead rows and columns for real.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .arch import ArchDescriptor, extract_profile
from .tensor import Tensor


class PruneRefusedError(RuntimeError):
    """Raised when a prune request would leave a block without channels."""


class Parameter(Tensor):
    """A trainable leaf.

    ``update_mask`` (broadcastable to the data) marks entries the optimizer
    may touch; ``decay`` toggles weight decay.
    """

    def __init__(self, data, decay: bool = True):
        super().__init__(np.asarray(data, dtype=T.DEFAULT_DTYPE), requires_grad=True)
        self.decay = decay
        self.update_mask: np.ndarray | None = None

    @property
    def active_size(self) -> int:
        if self.update_mask is None:
            return self.data.size
        return int(np.broadcast_to(self.update_mask, self.data.shape).sum())


class Module:
    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (k * k * cout))
        self.weight = Parameter(rng.normal(0.0, std, size=(cout, cin, k, k)))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int):
        self.gamma = Parameter(np.ones(c), decay=False)
        self.beta = Parameter(np.zeros(c), decay=False)
        self.running_mean = np.zeros(c, dtype=T.DEFAULT_DTYPE)
        self.running_var = np.ones(c, dtype=T.DEFAULT_DTYPE)

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)

    def select(self, keep: np.ndarray) -> "BatchNorm2d":
        bn = BatchNorm2d(int(keep.sum()))
        bn.gamma.data[:] = self.gamma.data[keep]
        bn.beta.data[:] = self.beta.data[keep]
        bn.running_mean[:] = self.running_mean[keep]
        bn.running_var[:] = self.running_var[keep]
        bn.training = self.training
        return bn


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(fin)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(fout, fin)))
        self.bias = Parameter(np.zeros(fout))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


@dataclass
class ChannelMask:
    block: int
    keep: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool).copy()
        if not self.keep.any():
            raise PruneRefusedError(f"block {self.block}: a mask needs at least one active channel")

    @property
    def active(self) -> int:
        return int(self.keep.sum())

    @property
    def full(self) -> bool:
        return bool(self.keep.all())

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


class ActivationHooks:
    """Collects the prune-point activation of each block during a forward pass."""

    def __init__(self):
        self.captured: dict[int, Tensor] = {}

    def capture(self, block: int, activation: Tensor) -> None:
        if activation.requires_grad:
            activation.retain_grad()
        self.captured[block] = activation

    def pairs(self):
        """Yield ``(block, A, dL/dA)`` after backward."""
        for block, t in sorted(self.captured.items()):
            yield block, t.data, t.grad

    def clear(self):
        self.captured.clear()


class _MaskableBlock(Module):
    """Shared masking logic. Subclasses name the three sliced layers."""

    slots: int
    mask: ChannelMask

    def _sliced(self):
        """(producing conv, intermediate bn, consuming conv)"""
        raise NotImplementedError

    def apply_mask(self, channel: int):
        if not 0 <= channel < self.mask.keep.size or not self.mask.keep[channel]:
            raise PruneRefusedError(f"block {self.mask.block}: channel {channel} is not active")
        if self.mask.active <= 1:
            raise PruneRefusedError(f"block {self.mask.block}: refusing to prune the last active channel")
        self.mask.keep[channel] = False
        self._sync_update_masks()
        return self

    def _sync_update_masks(self):
        producer, bn, consumer = self._sliced()
        keep = self.mask.keep
        if keep.all():
            masks = (None, None, None)
        else:
            masks = (keep[:, None, None, None], keep, keep[None, :, None, None])
        producer.weight.update_mask = masks[0]
        bn.gamma.update_mask = masks[1]
        bn.beta.update_mask = masks[1]
        consumer.weight.update_mask = masks[2]

    def _gate(self, h: Tensor, hooks: ActivationHooks | None) -> Tensor:
        if not self.mask.full:
            h = T.channel_mask(h, self.mask.keep)
        if hooks is not None:
            hooks.capture(self.mask.block, h)
        return h

    def compact(self):
        new = copy.deepcopy(self)
        keep = self.mask.keep
        producer, bn, consumer = new._sliced()
        producer.weight = Parameter(producer.weight.data[keep])
        consumer.weight = Parameter(consumer.weight.data[:, keep])
        new._replace_bn(bn.select(keep))
        new.mask = ChannelMask(self.mask.block, np.ones(int(keep.sum()), dtype=bool))
        return new

    def num_params(self) -> int:
        return sum(p.active_size for p in self.parameters())


class ResidualBlock(_MaskableBlock):
    """conv3x3 -> bn_mid -> relu -> [prune point] -> conv3x3 -> bn_out, plus shortcut, then relu."""

    def __init__(self, block: int, n_i: int, n_m: int, n_out: int, stride: int = 1,
                 slots: int | None = None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_i, self.n_out, self.stride = n_i, n_out, stride
        self.slots = n_out if slots is None else slots
        self.conv1 = Conv2d(n_i, n_m, 3, stride, 1, rng)
        self.bn_mid = BatchNorm2d(n_m)
        self.conv2 = Conv2d(n_m, n_out, 3, 1, 1, rng)
        self.bn_out = BatchNorm2d(n_out)
        self.shortcut = None
        if stride > 1 or n_i != n_out:
            self.shortcut = _Shortcut(n_i, n_out, stride, rng)
        self.mask = ChannelMask(block, np.ones(n_m, dtype=bool))

    def _sliced(self):
        return self.conv1, self.bn_mid, self.conv2

    def _replace_bn(self, bn):
        self.bn_mid = bn

    def forward(self, x: Tensor, hooks: ActivationHooks | None = None) -> Tensor:
        if x.shape[1] != self.n_i:
            raise T.DimensionError(f"block {self.mask.block} expects {self.n_i} channels, got {x.shape[1]}")
        h = T.relu(self.bn_mid(self.conv1(x)))
        h = self._gate(h, hooks)
        out = self.bn_out(self.conv2(h))
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.relu(out + skip)


class _Shortcut(Module):
    def __init__(self, cin, cout, stride, rng):
        self.conv = Conv2d(cin, cout, 1, stride, 0, rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return self.bn(self.conv(x))


class DenseBottleneckBlock(_MaskableBlock):
    """bn1 -> relu -> conv1x1 -> bn2 -> relu -> [prune point] -> conv3x3, concatenated onto the input."""

    def __init__(self, block: int, n_i: int, n_m: int, growth: int, slots: int | None = None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_i, self.growth = n_i, growth
        self.n_out = n_i + growth
        self.slots = 4 * growth if slots is None else slots
        self.bn1 = BatchNorm2d(n_i)
        self.conv1 = Conv2d(n_i, n_m, 1, 1, 0, rng)
        self.bn2 = BatchNorm2d(n_m)
        self.conv2 = Conv2d(n_m, growth, 3, 1, 1, rng)
        self.mask = ChannelMask(block, np.ones(n_m, dtype=bool))

    def _sliced(self):
        return self.conv1, self.bn2, self.conv2

    def _replace_bn(self, bn):
        self.bn2 = bn

    def forward(self, x: Tensor, hooks: ActivationHooks | None = None) -> Tensor:
        if x.shape[1] != self.n_i:
            raise T.DimensionError(f"block {self.mask.block} expects {self.n_i} channels, got {x.shape[1]}")
        h = self.conv1(T.relu(self.bn1(x)))
        h = self._gate(T.relu(self.bn2(h)), hooks)
        return T.concat([x, self.conv2(h)], axis=1)


class Transition(Module):
    def __init__(self, cin: int, cout: int, rng=None):
        self.bn = BatchNorm2d(cin)
        self.conv = Conv2d(cin, cout, 1, 1, 0, rng)

    def forward(self, x):
        return T.avg_pool2d(self.conv(T.relu(self.bn(x))), 2)


def block_forward(block, x: Tensor, hooks: ActivationHooks | None = None) -> Tensor:
    return block.forward(x, hooks)


def apply_mask(block, channel: int):
    return block.apply_mask(channel)


def compact(block):
    return block.compact()


# -- networks -----------------------------------------------------------------


class Network(Module):
    """Stem, a flat list of maskable blocks, and a linear head."""

    arch: ArchDescriptor
    blocks: list

    def forward(self, x: Tensor, hooks: ActivationHooks | None = None) -> Tensor:
        h = self._stem(x)
        for j, block in enumerate(self.blocks):
            h = block(h, hooks)
            h = self._after_block(j, h)
        return self.fc(T.global_avg_pool(self._pre_head(h)))

    def _after_block(self, j, h):
        return h

    def _pre_head(self, h):
        return h

    def num_params(self) -> int:
        """Parameters that survive compaction (masked slots excluded)."""
        return sum(p.active_size for p in self.parameters())

    def compact(self) -> "Network":
        new = copy.deepcopy(self)
        new.blocks = [b.compact() for b in self.blocks]
        new.arch = extract_profile(self).descriptor()
        return new

    def masks(self) -> list[ChannelMask]:
        return [b.mask for b in self.blocks]

    def prunable_channels(self) -> int:
        return sum(b.mask.active - 1 for b in self.blocks)


class ResidualNet(Network):
    def __init__(self, arch: ArchDescriptor, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.arch = arch
        c0 = arch.stem_channels
        self.imagenet_stem = arch.family == "resnet"
        if self.imagenet_stem:
            self.stem_conv = Conv2d(3, c0, 7, 2, 3, rng)
        else:
            self.stem_conv = Conv2d(3, c0, 3, 1, 1, rng)
        self.stem_bn = BatchNorm2d(c0)
        self.blocks = [
            ResidualBlock(b.block, b.n_i, b.n_m, arch.block_out(b.block), b.stride, b.n_o, rng)
            for b in arch.profile
        ]
        self.fc = Linear(arch.final_channels, arch.classes, rng)

    def _stem(self, x):
        h = T.relu(self.stem_bn(self.stem_conv(x)))
        if self.imagenet_stem:
            h = T.max_pool2d(h, 3, 2, 1)
        return h


class DenseNet(Network):
    def __init__(self, arch: ArchDescriptor, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.arch = arch
        self.stem_conv = Conv2d(3, arch.stem_channels, 3, 1, 1, rng)
        self.blocks = []
        self.transitions = {}
        last = len(arch.profile) - 1
        for b in arch.profile:
            self.blocks.append(DenseBottleneckBlock(b.block, b.n_i, b.n_m, arch.growth_rate, b.n_o, rng))
            if arch.is_stage_end(b.block) and b.block != last:
                c = arch.block_out(b.block)
                self.transitions[str(b.block)] = Transition(c, arch.transition_out(c), rng)
        self.head_bn = BatchNorm2d(arch.final_channels)
        self.fc = Linear(arch.final_channels, arch.classes, rng)

    def _stem(self, x):
        return self.stem_conv(x)

    def _after_block(self, j, h):
        t = self.transitions.get(str(j))
        return h if t is None else t(h)

    def _pre_head(self, h):
        return T.relu(self.head_bn(h))


def build_network(arch: ArchDescriptor, seed: int = 0) -> Network:
    """Instantiate ``arch`` with seeded He-normal conv initialisation."""
    rng = np.random.default_rng(seed)
    if arch.family == "densenet-bc":
        return DenseNet(arch, rng)
    return ResidualNet(arch, rng)


def set_masks(network: Network, keeps) -> Network:
    for block, keep in zip(network.blocks, keeps):
        block.mask = ChannelMask(block.mask.block, keep)
        block._sync_update_masks()
    return network
