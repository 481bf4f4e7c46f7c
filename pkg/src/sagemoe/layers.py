"""Parameterised building blocks: linear maps, convolutions and the backbone blocks."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Attribute-walking parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; submodules are
    ``Module`` attributes or lists of modules. Attribute order is insertion
    order, so parameter names are deterministic.
    """

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        seen: set[int] = set()
        self._collect(prefix, out, seen)
        return out

    def _collect(self, prefix, out, seen):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    out.append((full, value))
            elif isinstance(value, Module):
                value._collect(full + ".", out, seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{full}.{i}.", out, seen)
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        item._collect(f"{full}.{key}.", out, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x W + b`` over the last axis; ``identity=True`` starts from W = I."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, identity: bool = False, bias: bool = True):
        if identity and d_in == d_out:
            w = np.eye(d_in)
        else:
            w = rng.normal((d_in, d_out), std=1.0 / math.sqrt(d_in))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class ChannelLinear(Module):
    """Per-pixel linear map on ``[B, C, H, W]`` (a 1x1 convolution)."""

    def __init__(self, c_in: int, c_out: int, rng: Rng, identity: bool = False):
        if identity and c_in == c_out:
            w = np.eye(c_in)
        else:
            w = rng.normal((c_out, c_in), std=1.0 / math.sqrt(c_in))
        self.weight = param(w)
        self.bias = param(np.zeros((c_out, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        y = T.matmul(self.weight, T.reshape(x, (B, C, H * W)))
        return T.reshape(T.add(y, self.bias), (B, -1, H, W))


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, scale: float = 1.0):
        std = scale * math.sqrt(2.0 / (9 * c_in))
        self.weight = param(rng.normal((c_out, c_in, 3, 3), std=std))
        self.bias = param(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, axis: int = -1):
        self._axis = axis
        shape = (dim,) if axis == -1 else (dim, 1, 1)
        self.gain = param(np.ones(shape))
        self.bias = param(np.zeros(shape))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, axis=self._axis)


class ConvBlock(Module):
    """conv3x3 -> channel layer-norm -> SiLU -> conv3x3, added to the input.

    Shape preserving on ``[B, C, H, W]``; resolution agnostic, though the
    block has a native grid (the one its own layer runs at).
    """

    kind = "conv"

    def __init__(self, channels: int, rng: Rng):
        self.conv1 = Conv3x3(channels, channels, rng)
        self.norm = LayerNorm(channels, axis=1)
        self.conv2 = Conv3x3(channels, channels, rng, scale=0.5)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(T.silu(self.norm(self.conv1(x))))
        return T.add(x, h)


class AttnBlock(Module):
    """Pre-norm single-head attention then pre-norm MLP, both residual."""

    kind = "attn"

    def __init__(self, dim: int, rng: Rng, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)
        self.fc2.weight.data *= 0.5

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = T.add(x, self.proj(T.attention(self.q(h), self.k(h), self.v(h))))
        return T.add(x, self.fc2(T.silu(self.fc1(self.norm2(x)))))


class SharedMlp(Module):
    """Two-layer token MLP whose output is added to the input through a sigmoid gate."""

    kind = "shared"

    def __init__(self, dim: int, hidden: int, rng: Rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.fc2.weight.data *= 0.5
        self.gate = param(np.zeros(1))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc2(T.silu(self.fc1(x)))
        return T.add(x, T.mul(T.sigmoid(self.gate), h))
