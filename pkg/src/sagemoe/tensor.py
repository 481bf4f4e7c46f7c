"""Dense float64 tensors with reverse-mode gradients.

Every primitive records a closure that maps the output gradient to parent
gradients. ``backward`` walks the recorded graph in reverse topological order
and accumulates into ``grad`` additively, so a tensor used twice receives the
sum of both contributions.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# op name -> multiplier applied to that op's outgoing gradient; test hook only
_GRAD_FAULTS: dict[str, float] = {}


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar keeps model code readable
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf with requires_grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    # interior nodes get fresh buffers; leaves keep accumulating
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if _GRAD_FAULTS:
            g = g * _GRAD_FAULTS.get(node.op, 1.0)
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


@contextlib.contextmanager
def fault_injection(op: str, scale: float):
    """Scale the gradient flowing out of every ``op`` node; negative-control hook."""
    _GRAD_FAULTS[op] = scale
    try:
        yield
    finally:
        _GRAD_FAULTS.pop(op, None)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    hi = x > 30.0
    lo = x < -30.0
    mid = ~(hi | lo)
    out[mid] = 1.0 / (1.0 + np.exp(-x[mid]))
    out[hi] = 1.0 - np.exp(-x[hi])
    out[lo] = np.exp(x[lo])
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    hi = x > 30.0
    lo = x < -30.0
    mid = ~(hi | lo)
    out[mid] = np.log1p(np.exp(x[mid]))
    out[hi] = x[hi] + np.exp(-x[hi])
    out[lo] = np.exp(x[lo])
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(_softplus(x.data), (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def silu(x: Tensor) -> Tensor:
    """Sigmoid-gated activation ``x * sigmoid(x)``."""
    return mul(x, sigmoid(x))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def getitem(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter back with ``np.add.at``."""

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw, "getitem")


def scatter_rows(src: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """Place ``src[i]`` at row ``rows[i]`` of a zero tensor with ``n`` rows."""
    out = np.zeros((n,) + src.shape[1:])
    out[rows] = src.data
    return _make(out, (src,), lambda g: (g[rows],), "scatter_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = (g[..., None] * ad).reshape(-1, bd.shape[0]).sum(axis=0)
            return ga, gb
        if ad.ndim == 1:
            ga = (bd @ g[..., :, None])[..., 0]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- softmax family


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(
        s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax"
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(
        out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax"
    )


def softmax_over(v: Tensor, indices) -> Tensor:
    """Softmax restricted to ``indices`` along the last axis; zeros elsewhere.

    ``indices`` is either a sequence of positions (shared by every row) or a
    boolean mask broadcastable to ``v``.
    """
    v = as_tensor(v)
    mask = _selection_mask(v.shape, indices)
    z = np.where(mask, v.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(
        s, (v,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax_over"
    )


def _selection_mask(shape, indices) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.dtype == bool:
        mask = np.broadcast_to(idx, shape)
    else:
        if idx.size == 0:
            raise ValueError("softmax_over needs a nonempty index set")
        if idx.min() < 0 or idx.max() >= shape[-1]:
            raise IndexError(f"indices {idx.tolist()} out of range for length {shape[-1]}")
        mask = np.zeros(shape[-1], dtype=bool)
        mask[idx] = True
        mask = np.broadcast_to(mask, shape)
    if not mask.any(axis=-1).all():
        raise ValueError("softmax_over needs a nonempty index set in every row")
    return mask


# ---------------------------------------------------------------- normalisation / pooling


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance along ``axis`` (layer norm without the affine part)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[axis]

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), bw, "normalize") if n > 0 else x


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    return add(mul(normalize(x, axis=axis), gain), bias)


def global_mean_pool(z: Tensor, layout: str = "map") -> Tensor:
    """Mean over every non-channel position.

    ``layout="map"`` expects ``[..., C, H, W]`` and ``"tokens"`` expects
    ``[..., T, D]``; the result drops the spatial/token axes.
    """
    if layout == "map":
        if z.shape[-1] * z.shape[-2] == 0:
            raise ValueError("global_mean_pool on an empty spatial extent")
        return mean(z, axis=(z.ndim - 2, z.ndim - 1))
    if layout == "tokens":
        if z.shape[-2] == 0:
            raise ValueError("global_mean_pool on an empty token sequence")
        return mean(z, axis=z.ndim - 2)
    raise ValueError(f"unknown layout {layout!r}")


# ---------------------------------------------------------------- spatial ops


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padding 2-D convolution (cross-correlation), odd square kernels.

    x: [B, C, H, W], w: [Co, C, k, k], b: [Co].
    """
    B, C, H, W = x.shape
    Co, Ci, k, k2 = w.shape
    if Ci != C or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # [B, C, H, W, k, k] -> [B, C*k*k, H*W]
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = cols.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, H * W)
    wm = w.data.reshape(Co, C * k * k)
    out = (wm @ cols).reshape(B, Co, H, W)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data[:, None, None]
        parents = (x, w, b)

    def bw(g):
        gm = g.reshape(B, Co, H * W)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = (wm.T @ gm).reshape(B, C, k, k, H, W)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[:, :, dy : dy + H, dx : dx + W] += gcols[:, :, dy, dx]
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, bw, "conv2d")


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (x,), bw, "upsample")


def downsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour downsampling (keeps the top-left sample of each cell)."""
    if factor == 1:
        return x
    H, W = x.shape[-2:]
    if H % factor or W % factor:
        raise ValueError(f"cannot downsample {H}x{W} by {factor}")

    def bw(g):
        out = np.zeros_like(x.data)
        out[..., ::factor, ::factor] = g
        return (out,)

    return _make(x.data[..., ::factor, ::factor].copy(), (x,), bw, "downsample")


def resample(x: Tensor, size: int) -> Tensor:
    """Nearest-neighbour resize of a square grid to ``size`` (integer ratios only)."""
    n = x.shape[-1]
    if n == size:
        return x
    if size > n:
        if size % n:
            raise ValueError(f"non-integer resample ratio {n}->{size}")
        return upsample(x, size // n)
    if n % size:
        raise ValueError(f"non-integer resample ratio {n}->{size}")
    return downsample(x, n // size)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over ``[..., T, D]`` inputs."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), scale)
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def check_finite(x: Tensor, where: str) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError(f"non-finite values in {where}")
    return x
