"""Gradient-check cases: op name -> builder(rng, shape_index) -> (fn, inputs).

Shared by the per-op tests and the acceptance run so both check the same graphs.
"""

from __future__ import annotations

import numpy as np

from structprune import tensor as T
from structprune.layers import ChannelMask, DenseBottleneckBlock, ResidualBlock, compact

SHAPES = ((2, 3, 5, 5), (1, 2, 4, 6), (3, 4, 3, 3))


def _away_from_zero(rng, shape, margin=0.05):
    """Values with |v| >= margin so relu kinks sit outside the difference stencil."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _distinct(rng, shape):
    """Values at least 0.01 apart so max-pool winners never swap under a 1e-3 nudge."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape) + rng.uniform(0, 1e-4, size=shape)


def _conv(stride, padding, k):
    def build(rng, si):
        n, c, h, w = SHAPES[si]
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((3, c, k, k)) * 0.5

        def fn(x, wt):
            return T.conv2d(x, wt, stride, padding)

        return fn, [x, wt]

    return build


def _conv_method(method, stride):
    def build(rng, si):
        n, c, h, w = SHAPES[si]
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((2, c, 3, 3)) * 0.5
        return (lambda x, wt: T.conv2d(x, wt, stride, 1, method=method)), [x, wt]

    return build


def _bn(training):
    def build(rng, si):
        shape = SHAPES[si]
        c = shape[1]
        x = rng.standard_normal(shape) * 2 + 0.5
        gamma = rng.uniform(0.5, 1.5, size=c)
        beta = rng.standard_normal(c)
        rm = rng.standard_normal(c).astype(np.float32)
        rv = rng.uniform(0.5, 2.0, size=c).astype(np.float32)

        def fn(x, gamma, beta):
            return T.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training=training)

        return fn, [x, gamma, beta]

    return build


def _elementwise(kind):
    def build(rng, si):
        shape = SHAPES[si]
        a = rng.standard_normal(shape)
        if kind == "add":
            b = rng.standard_normal((1, shape[1], 1, 1))
            return (lambda a, b: T.add(a, b)), [a, b]
        if kind == "mul":
            b = rng.standard_normal((1, shape[1], 1, 1))
            return (lambda a, b: T.mul(a, b)), [a, b]
        if kind == "sub_div":
            b = rng.standard_normal(shape)
            return (lambda a, b: (a - b) / 4.0), [a, b]
        if kind == "power":
            return (lambda a: T.power(a, 3.0)), [a]
        if kind == "neg":
            return (lambda a: T.neg(a)), [a]
        if kind == "relu":
            return (lambda a: T.relu(a)), [_away_from_zero(rng, shape)]
        if kind == "mean":
            return (lambda a: T.mean(a)), [a]
        if kind == "sum":
            return (lambda a: T.tsum(a)), [a]
        if kind == "reshape":
            return (lambda a: T.reshape(a, (shape[0], -1))), [a]
        if kind == "flatten":
            return (lambda a: T.flatten(a)), [a]
        if kind == "mask":
            keep = np.zeros(shape[1], dtype=bool)
            keep[:: 2] = True
            return (lambda a: T.channel_mask(a, keep)), [a]
        raise KeyError(kind)

    return build


def _concat(rng, si):
    n, c, h, w = SHAPES[si]
    a = rng.standard_normal((n, c, h, w))
    b = rng.standard_normal((n, 2, h, w))
    return (lambda a, b: T.concat([a, b], axis=1)), [a, b]


def _linear(rng, si):
    n, c, h, w = SHAPES[si]
    fin = c * h
    x = rng.standard_normal((n, fin))
    wt = rng.standard_normal((5, fin))
    b = rng.standard_normal(5)
    return (lambda x, wt, b: T.linear(x, wt, b)), [x, wt, b]


def _gap(rng, si):
    return (lambda x: T.global_avg_pool(x)), [rng.standard_normal(SHAPES[si])]


def _avgpool(rng, si):
    n, c, h, w = SHAPES[si]
    shape = (n, c, 2 * h, 2 * w)
    return (lambda x: T.avg_pool2d(x, 2)), [rng.standard_normal(shape)]


def _maxpool(rng, si):
    n, c, h, w = SHAPES[si]
    shape = (n, c, h + 2, w + 2)
    return (lambda x: T.max_pool2d(x, 3, 2, 1)), [_distinct(rng, shape)]


def _xent(rng, si):
    n = SHAPES[si][0] + 1
    classes = 4 + si
    logits = rng.standard_normal((n, classes)) * 2
    labels = rng.integers(0, classes, size=n)
    return (lambda z: T.reshape(T.softmax_cross_entropy(z, labels), (1,))), [logits]


def _composed(rng, si):
    """conv -> bn -> relu -> gap -> linear -> cross-entropy, gradients for every leaf."""
    n, c, h, w = SHAPES[si]
    n = max(n, 2)
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((4, c, 3, 3)) * 0.5
    gamma = rng.uniform(0.5, 1.5, size=4)
    beta = rng.standard_normal(4)
    fw = rng.standard_normal((3, 4))
    fb = rng.standard_normal(3)
    labels = rng.integers(0, 3, size=n)
    rm, rv = np.zeros(4, np.float32), np.ones(4, np.float32)

    def fn(x, wt, gamma, beta, fw, fb):
        h = T.conv2d(x, wt, 1, 1)
        h = T.relu(T.batch_norm(h, gamma, beta, rm.copy(), rv.copy(), training=True))
        z = T.linear(T.global_avg_pool(h), fw, fb)
        return T.reshape(T.softmax_cross_entropy(z, labels), (1,))

    return fn, [x, wt, gamma, beta, fw, fb]


def _residual_block(rng, si):
    n, c, h, w = SHAPES[si]
    n = max(n, 2)
    block = ResidualBlock(0, c, 3, 4, stride=1 + si % 2, rng=rng)
    keep = np.ones(3, dtype=bool)
    keep[1] = False
    block.mask.keep[:] = keep
    block._sync_update_masks()
    x = rng.standard_normal((n, c, h, w))
    return (lambda x: block(x)), [x]


def _dense_block(rng, si):
    n, c, h, w = SHAPES[si]
    n = max(n, 2)
    block = DenseBottleneckBlock(0, c, 4, 2, rng=rng)
    x = rng.standard_normal((n, c, h, w))
    return (lambda x: block(x)), [x]


GRAD_CASES = {
    "add": _elementwise("add"),
    "mul": _elementwise("mul"),
    "sub_div": _elementwise("sub_div"),
    "power": _elementwise("power"),
    "neg": _elementwise("neg"),
    "relu": _elementwise("relu"),
    "sum": _elementwise("sum"),
    "mean": _elementwise("mean"),
    "reshape": _elementwise("reshape"),
    "flatten": _elementwise("flatten"),
    "channel_mask": _elementwise("mask"),
    "concat": _concat,
    "conv2d_3x3_s1_p1": _conv(1, 1, 3),
    "conv2d_3x3_s2_p1": _conv(2, 1, 3),
    "conv2d_1x1_s1_p0": _conv(1, 0, 1),
    "conv2d_1x1_s2_p0": _conv(2, 0, 1),
    "conv2d_2x2_s1_p0": _conv(1, 0, 2),
    "conv2d_shift": _conv_method("shift", 1),
    "conv2d_im2col": _conv_method("im2col", 1),
    "batch_norm_train": _bn(True),
    "batch_norm_eval": _bn(False),
    "linear": _linear,
    "global_avg_pool": _gap,
    "avg_pool2d": _avgpool,
    "max_pool2d": _maxpool,
    "softmax_cross_entropy": _xent,
    "composed_conv_bn_relu_linear": _composed,
    "residual_block": _residual_block,
    "dense_bottleneck_block": _dense_block,
}

GRAD_SEEDS = tuple(range(10))


# -- masked vs compacted blocks ---------------------------------------------


def rel_diff(a, b):
    return float(np.abs(a - b).max()) / max(float(np.abs(a).max()), 1e-12)


def random_block(rng, kind):
    if kind == "residual":
        n_i = int(rng.integers(1, 7))
        n_o = int(rng.integers(2, 9))
        stride = int(rng.choice([1, 2]))
        return ResidualBlock(0, n_i, n_o, n_o if rng.random() < 0.5 else n_o + 1, stride, rng=rng), n_i
    n_i = int(rng.integers(1, 9))
    k = int(rng.integers(1, 5))
    return DenseBottleneckBlock(0, n_i, 4 * k, k, rng=rng), n_i


def randomize_bn(block, rng):
    """Non-trivial affine and running stats so eval-mode equivalence is meaningful."""
    for name, p in block.named_parameters():
        if "bn" in name:
            p.data[:] = rng.uniform(0.5, 1.5, p.data.shape) if name.endswith("gamma") else rng.normal(0, 0.3, p.data.shape)
    for name, buf in block.named_buffers():
        buf[:] = rng.uniform(0.5, 1.5, buf.shape) if name.endswith("var") else rng.normal(0, 0.3, buf.shape)


def random_keep(rng, slots):
    keep = rng.random(slots) < rng.uniform(0.2, 0.9)
    if not keep.any():
        keep[rng.integers(slots)] = True
    return keep


def masked_vs_compact(seed, kind, training):
    rng = np.random.default_rng(seed)
    block, n_i = random_block(rng, kind)
    randomize_bn(block, rng)
    keep = random_keep(rng, block.mask.keep.size)
    block.mask = ChannelMask(0, keep)
    block._sync_update_masks()
    block.train(training)
    small = compact(block)
    x = T.Tensor(rng.standard_normal((int(rng.integers(1, 4)), n_i, 6, 6)))
    with T.no_grad():
        a = block(x).data
        b = small(x).data
    return block, small, keep, a, b
