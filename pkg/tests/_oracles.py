"""Independent reference implementations used by the test suite.

Nothing here imports the package's math; each oracle is the slow, obvious
version of the thing it checks.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from structprune import tensor as T

FD_EPS = 1e-3
GRAD_TOL = 1e-2


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max |n|, the scale-aware error we hold gradients to."""
    scale = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / scale


@contextmanager
def relu_patterns():
    """Record the sign pattern of every relu input while active."""
    seen = []
    original = T.relu

    def recording(a):
        seen.append(a.data > 0)
        return original(a)

    T.relu = recording
    try:
        yield seen
    finally:
        T.relu = original


def _same_patterns(p, q):
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


@dataclass
class GradReport:
    error: float
    checked: int
    skipped: int


def gradcheck_report(fn, inputs, seed=0, eps=FD_EPS) -> GradReport:
    """Compare float32 reverse-mode gradients of ``sum(R * fn(*inputs))`` to float64 central differences.

    ``fn`` maps Tensors to a Tensor. Coordinates whose +-eps stencil flips a
    relu are skipped: the function is not differentiable inside that
    interval, so the central difference is not a valid reference there.
    """
    # separate stream: a weighting drawn from the same seed as the inputs can
    # line up with them and cancel the gradient being checked
    rng = np.random.default_rng([seed, 0x5EED])
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    out64 = fn(*[T.Tensor(a, dtype=np.float64) for a in arrays]).data
    weight = rng.standard_normal(out64.shape)

    def loss64(arrs):
        with relu_patterns() as seen:
            value = float((fn(*[T.Tensor(a, dtype=np.float64) for a in arrs]).data * weight).sum())
        return value, seen

    leaves = [T.Tensor(a, requires_grad=True, dtype=np.float32) for a in arrays]
    out = fn(*leaves)
    loss = T.tsum(T.mul(out, T.Tensor(weight, dtype=np.float32)))
    T.backward(loss)

    worst, checked, skipped = 0.0, 0, 0
    for i, a in enumerate(arrays):
        analytic = leaves[i].grad
        assert analytic is not None, f"input {i} received no gradient"
        assert analytic.shape == a.shape
        numeric = np.zeros_like(a)
        valid = np.ones(a.shape, dtype=bool)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            lp, sp = loss64(plus)
            lm, sm = loss64(minus)
            numeric[idx] = (lp - lm) / (2 * eps)
            valid[idx] = _same_patterns(sp, sm)
        checked += int(valid.sum())
        skipped += int((~valid).sum())
        if valid.any():
            scale = max(float(np.abs(numeric).max()), 1e-8)
            err = float(np.abs(analytic.astype(np.float64) - numeric)[valid].max()) / scale
            worst = max(worst, err)
    return GradReport(worst, checked, skipped)


def gradcheck(fn, inputs, seed=0, eps=FD_EPS) -> float:
    return gradcheck_report(fn, inputs, seed, eps).error


def naive_conv2d(x, w, stride, padding):
    """Direct six-loop cross-correlation in float64."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, f, i, j] = float((patch * w[f]).sum())
    return out


def naive_fisher(batches):
    """Delta_c per channel by explicit loops: sum_n (-sum_ij A g)^2 / (2 N)."""
    channels = batches[0][0].shape[1]
    total = np.zeros(channels)
    count = 0
    for a, g in batches:
        for n in range(a.shape[0]):
            for c in range(channels):
                s = 0.0
                for i in range(a.shape[2]):
                    for j in range(a.shape[3]):
                        s += float(a[n, c, i, j]) * float(g[n, c, i, j])
                total[c] += (-s) ** 2
            count += 1
    return total / (2 * count)


def brute_force_rank(records, masks):
    """Stable sort of prunable records by (delta, block, channel) using sorted()."""
    active = {m.block: m for m in masks}
    eligible = [r for r in records if active[r.block].active > 1 and active[r.block].keep[r.channel]]
    return sorted(eligible, key=lambda r: (r.delta_c, r.block, r.channel))


def residual_block_conv_params(n_i, n_m, n_o):
    return 9 * n_i * n_m + 9 * n_m * n_o


def zeroed_channel_loss_increase(network, x, y, channels, batch_size=250):
    """Measured held-out loss change from silencing each (block, channel) in turn.

    Silencing is done by zeroing the intermediate BN's gamma and beta, so the
    following ReLU emits exactly 0; the masking code is not involved.
    """
    from structprune.train import mean_loss

    base = mean_loss(network, x, y, batch_size)
    out = []
    for b, c in channels:
        block = network.blocks[b]
        bn = block.bn_mid if hasattr(block, "bn_mid") else block.bn2
        saved = bn.gamma.data[c], bn.beta.data[c]
        bn.gamma.data[c] = bn.beta.data[c] = 0
        out.append(mean_loss(network, x, y, batch_size) - base)
        bn.gamma.data[c], bn.beta.data[c] = saved
    return np.array(out)
