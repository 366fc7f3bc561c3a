"""Dense NCHW tensors with tape-based reverse-mode autodiff.

Everything is numpy underneath. Tensors default to float32; float64 is
accepted so that finite-difference oracles can run at higher precision
through the same ops.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when tensor extents do not conform."""


class StaleTapeError(RuntimeError):
    """Raised when backward is called twice on the same recorded graph."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """A node in the autodiff graph.

    ``data`` holds the value, ``grad`` the accumulated gradient after a
    backward pass. Leaves created with ``requires_grad=True`` always keep
    their gradient; intermediate nodes keep it only if ``retain_grad()``
    was called.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        if self.data.ndim > 4:
            raise DimensionError(f"tensors have at most 4 extents, got shape {self.data.shape}")
        if any(d < 1 for d in self.data.shape):
            raise DimensionError(f"all extents must be >= 1, got shape {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._retain = False
        self._consumed = False

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> "GradTape":
        return backward(self)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# -- tape ------------------------------------------------------------------


class GradTape:
    """Nodes reachable from a loss, in the reverse topological order visited."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> GradTape:
    """Populate ``grad`` on every leaf and retained node reachable from ``loss``."""
    if loss._consumed:
        raise StaleTapeError("backward already ran on this graph; run the forward pass again")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")

    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    visited: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        visited.append(node)
        if g is None:
            continue
        if node.is_leaf or node._retain:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
        node._consumed = True
    return GradTape(visited)


# -- elementwise and reduction ops -----------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), bw)


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.data.dtype),)

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def bw(g):
        return (g * pos,)

    return _make(a.data * pos, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, tuple(tensors), bw)


def channel_mask(a: Tensor, keep: np.ndarray) -> Tensor:
    """Zero out channels where ``keep`` is false (no gradient flows through them)."""
    if keep.shape != (a.shape[1],):
        raise DimensionError(f"mask of length {keep.shape} does not match {a.shape[1]} channels")
    m = keep.astype(a.data.dtype).reshape(1, -1, *([1] * (a.data.ndim - 2)))
    return _make(a.data * m, (a,), lambda g: (g * m,))


# -- convolution -----------------------------------------------------------


def _conv_shift(xp: np.ndarray, w: np.ndarray, out_hw: tuple[int, int]):
    """Stride-1 convolution over the flattened padded input.

    One matmul produces every kernel tap's response; the taps are then
    summed with the flat offset ``i * Wp + j``. Wrap-around only lands on
    positions that are cropped away.
    """
    n, c, hp, wp = xp.shape
    o, _, k, _ = w.shape
    ho, wo = out_hw
    flat = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(c, -1)
    length = flat.shape[1]
    taps = (np.ascontiguousarray(w.transpose(2, 3, 0, 1)).reshape(k * k * o, c) @ flat).reshape(k * k, o, length)
    acc = taps[0].copy()
    for t in range(1, k * k):
        off = (t // k) * wp + t % k
        acc[:, : length - off] += taps[t, :, off:]
    out = acc.reshape(o, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), flat


def _conv_shift_backward(g, flat, w, xp_shape):
    n, c, hp, wp = xp_shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2:]
    gfull = np.zeros((o, n, hp, wp), dtype=g.dtype)
    gfull[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
    gflat = gfull.reshape(o, -1)
    length = gflat.shape[1]
    dw = np.empty((k, k, o, c), dtype=w.dtype)
    for t in range(k * k):
        off = (t // k) * wp + t % k
        dw[t // k, t % k] = gflat[:, : length - off] @ flat[:, off:].T
    taps = (np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k * c, o) @ gflat).reshape(k * k, c, length)
    dflat = taps[0].copy()
    for t in range(1, k * k):
        off = (t // k) * wp + t % k
        dflat[:, off:] += taps[t, :, : length - off]
    dxp = dflat.reshape(c, n, hp, wp).transpose(1, 0, 2, 3)
    return dxp, np.ascontiguousarray(dw.transpose(2, 3, 0, 1))


def _im2col(xp: np.ndarray, k: int, stride: int, out_hw: tuple[int, int]) -> np.ndarray:
    ho, wo = out_hw
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, K, K) -> (C, K, K, N, Ho, Wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(xp.shape[1] * k * k, -1)


def _col2im(dcols: np.ndarray, xp_shape, k: int, stride: int, out_hw) -> np.ndarray:
    n, c, hp, wp = xp_shape
    ho, wo = out_hw
    dcols = dcols.reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    return dxp


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, method: str = "auto") -> Tensor:
    """2-D cross-correlation without bias.

    ``method`` picks the lowering: ``"shift"`` (stride 1 only), ``"im2col"``,
    or ``"auto"``, which also takes a direct matmul path for unpadded 1x1
    kernels.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, wd = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise DimensionError(f"input has {c} channels but weight expects {ci}")
    if k != k2:
        raise DimensionError(f"only square kernels are supported, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise DimensionError(f"kernel {k} exceeds padded extent {(h + 2 * padding, wd + 2 * padding)}")
    ho, wo = conv_output_hw(h, wd, k, stride, padding)
    w = weight.data

    if method == "auto":
        if k == 1 and padding == 0:
            method = "pointwise"
        elif stride == 1:
            method = "shift"
        else:
            method = "im2col"

    if method == "pointwise":
        if k != 1 or padding != 0:
            raise ValueError("pointwise path needs a 1x1 kernel without padding")
        xs = x.data[:, :, ::stride, ::stride]
        flat = np.ascontiguousarray(xs.transpose(1, 0, 2, 3)).reshape(c, -1)
        w2 = w.reshape(o, c)
        out = np.ascontiguousarray((w2 @ flat).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

        def bw(g):
            gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
            dw = (gf @ flat.T).reshape(w.shape)
            dxs = (w2.T @ gf).reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
            if stride == 1:
                dx = np.ascontiguousarray(dxs)
            else:
                dx = np.zeros_like(x.data)
                dx[:, :, ::stride, ::stride] = dxs
            return dx, dw

        return _make(out, (x, weight), bw)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    def crop(dxp):
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return np.ascontiguousarray(dxp)

    if method == "shift":
        if stride != 1:
            raise ValueError("shift lowering supports stride 1 only")
        out, flat = _conv_shift(xp, w, (ho, wo))

        def bw(g):
            dxp, dw = _conv_shift_backward(g, flat, w, xp.shape)
            return crop(dxp), dw

        return _make(out, (x, weight), bw)

    if method != "im2col":
        raise ValueError(f"unknown conv lowering {method!r}")
    cols = _im2col(xp, k, stride, (ho, wo))
    w2 = w.reshape(o, -1)
    out = np.ascontiguousarray((w2 @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        dw = (gf @ cols.T).reshape(w.shape)
        dxp = _col2im(w2.T @ gf, xp.shape, k, stride, (ho, wo))
        return crop(dxp), dw

    return _make(out, (x, weight), bw)


# -- normalization, pooling, heads ----------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average with ``momentum``).
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have length {c}, got {gamma.shape} and {beta.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError(f"running stats must have length {c}")
    dt = x.data.dtype
    shape = (1, c, 1, 1)
    if training:
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(shape)
        var = (centered**2).mean(axis=axes)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat = centered * inv_std.reshape(shape)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * m / max(m - 1, 1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def bw(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data.reshape(shape)
            dx = (inv_std.reshape(shape) / m) * (
                m * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
            )
            return dx.astype(dt), dgamma.astype(dt), dbeta.astype(dt)

    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(dt)
        xhat = (x.data - running_mean.astype(dt).reshape(shape)) * inv_std.reshape(shape)
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def bw(g):
            axes = (0, 2, 3)
            return (
                g * (gamma.data * inv_std).reshape(shape),
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

    return _make(out.astype(dt, copy=False), (x, gamma, beta), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias must have length {weight.shape[0]}, got {bias.shape}")
        out = out + bias.data

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise DimensionError(f"avg_pool2d window {k} larger than input {x.shape}")
    view = x.data[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, :, : ho * k, : wo * k] = np.broadcast_to(
            (g / (k * k))[:, :, :, None, :, None], (n, c, ho, k, wo, k)
        ).reshape(n, c, ho * k, wo * k)
        return (dx,)

    return _make(view.mean(axis=(3, 5)), (x,), bw)


def max_pool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    n, c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride].reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(dxp, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), g)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return (np.ascontiguousarray(dxp),)

    return _make(np.ascontiguousarray(out), (x,), bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch. ``labels`` are integer class ids."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not conform")
    n, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"label out of range for {classes} classes")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return (probs * (g / n),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)
