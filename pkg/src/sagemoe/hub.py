"""Shape-adapting hub: adapters between spatial maps and token sequences.

Every (layer, expert) pair gets its own ``AdapterPair``. The input side turns
the layer's input into the expert's native format; the output side turns the
expert's output into the layer's main-path output shape so the two paths can
be mixed elementwise. Token sequences are read as square raster grids (token
``t`` sits at row ``t // g``, column ``t % g``), and patches are flattened in
(channel, row, column) order.
"""

from __future__ import annotations

from typing import Sequence

from . import tensor as T
from .layers import ChannelLinear, Linear, Module
from .rng import Rng
from .shapes import ShapeSig
from .tensor import Tensor


def patchify(x: Tensor, p: int) -> Tensor:
    """[B, C, H, W] -> [B, (H/p)*(W/p), C*p*p]."""
    B, C, H, W = x.shape
    gh, gw = H // p, W // p
    y = T.reshape(x, (B, C, gh, p, gw, p))
    y = T.transpose(y, (0, 2, 4, 1, 3, 5))
    return T.reshape(y, (B, gh * gw, C * p * p))


def unpatchify(x: Tensor, p: int, channels: int) -> Tensor:
    """Inverse of :func:`patchify` for square grids."""
    B, n, _ = x.shape
    g = _isqrt(n)
    y = T.reshape(x, (B, g, g, channels, p, p))
    y = T.transpose(y, (0, 3, 1, 4, 2, 5))
    return T.reshape(y, (B, channels, g * p, g * p))


def _isqrt(n: int) -> int:
    g = int(round(n**0.5))
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    return g


def _ratio(big: int, small: int, what: str) -> int:
    if big % small:
        raise ValueError(f"{what}: grid {big} is not an integer multiple of {small}")
    return big // small


class _Step:
    """One stage of an adapter pipeline; subclasses are tiny callables."""

    def __call__(self, x: Tensor) -> Tensor:  # pragma: no cover - interface
        raise NotImplementedError


class _Patchify(_Step):
    def __init__(self, p):
        self.p = p

    def __call__(self, x):
        return patchify(x, self.p)


class _Unpatchify(_Step):
    def __init__(self, p, channels):
        self.p, self.channels = p, channels

    def __call__(self, x):
        return unpatchify(x, self.p, self.channels)


class _Resample(_Step):
    def __init__(self, size):
        self.size = size

    def __call__(self, x):
        return T.resample(x, self.size)


class _TokensToMap(_Step):
    def __call__(self, x):
        B, n, D = x.shape
        g = _isqrt(n)
        return T.transpose(T.reshape(x, (B, g, g, D)), (0, 3, 1, 2))


class _MapToTokens(_Step):
    def __call__(self, x):
        B, C, H, W = x.shape
        return T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, H * W, C))


class _Pipeline(Module):
    def __init__(self):
        self.projections: list[Module] = []
        self._steps: list = []

    def add(self, step):
        if isinstance(step, Module):
            self.projections.append(step)
        self._steps.append(step)

    def __call__(self, x: Tensor) -> Tensor:
        for step in self._steps:
            x = step(x)
        return x


def _convert(src: ShapeSig, dst: ShapeSig, rng: Rng, default_patch: int = 2) -> tuple[_Pipeline, ShapeSig]:
    """Build a pipeline from ``src`` to ``dst`` and return it with the resolved target signature.

    A ``dst`` token signature without a length is resolved here: map sources
    are patchified with ``default_patch`` and token sources keep their length.
    """
    pipe = _Pipeline()
    if src.layout == "map":
        C, H, _ = src.extents
        if dst.layout == "map":
            Cd, Hd, _ = dst.extents
            if Hd < H:
                _ratio(H, Hd, "map->map")
                pipe.add(_Resample(Hd))
                pipe.add(ChannelLinear(C, Cd, rng, identity=True))
            else:
                _ratio(Hd, H, "map->map")
                pipe.add(ChannelLinear(C, Cd, rng, identity=True))
                pipe.add(_Resample(Hd))
            return pipe, dst
        Td, Dd = dst.extents
        if Td is None:
            g = H // default_patch if H % default_patch == 0 and H >= default_patch else H
        else:
            g = _isqrt(Td)
        if H >= g:
            p = _ratio(H, g, "map->tokens")
        else:
            _ratio(g, H, "map->tokens")
            pipe.add(_Resample(g))
            p = 1
        pipe.add(_Patchify(p))
        pipe.add(Linear(C * p * p, Dd, rng, identity=True))
        return pipe, ShapeSig.tokens(g * g, Dd)

    n, D = src.extents
    if dst.layout == "map":
        gs = _isqrt(n)
        Cd, Hd, _ = dst.extents
        if Hd >= gs:
            q = _ratio(Hd, gs, "tokens->map")
            pipe.add(Linear(D, Cd * q * q, rng, identity=True))
            pipe.add(_Unpatchify(q, Cd))
        else:
            _ratio(gs, Hd, "tokens->map")
            pipe.add(Linear(D, Cd, rng, identity=True))
            pipe.add(_TokensToMap())
            pipe.add(_Resample(Hd))
        return pipe, dst
    Td, Dd = dst.extents
    pipe.add(Linear(D, Dd, rng, identity=True))
    if Td is None or Td == n:
        return pipe, ShapeSig.tokens(n, Dd)
    gs, gd = _isqrt(n), _isqrt(Td)
    if gd > gs:
        _ratio(gd, gs, "tokens->tokens")
    else:
        _ratio(gs, gd, "tokens->tokens")
    pipe.add(_TokensToMap())
    pipe.add(_Resample(gd))
    pipe.add(_MapToTokens())
    return pipe, dst


class AdapterPair(Module):
    """Input adapter (layer input -> expert input) and output adapter (expert output -> main output)."""

    def __init__(self, source: ShapeSig, expert_in: ShapeSig, expert_out: ShapeSig, main_out: ShapeSig, rng: Rng):
        self._source = source
        self._main_out = main_out
        self.s_in, self._expert_in = _convert(source, expert_in, rng)
        # shared MLPs are length agnostic: their output length equals the adapted input length
        if expert_out.layout == "tokens" and expert_out.extents[0] is None:
            expert_out = ShapeSig.tokens(self._expert_in.extents[0], expert_out.extents[1])
        self._expert_out = expert_out
        self.s_out, resolved = _convert(expert_out, main_out, rng)
        if resolved != main_out:
            raise ValueError(f"adapter cannot reach main shape {main_out} (got {resolved})")

    @property
    def source(self) -> ShapeSig:
        return self._source

    @property
    def target(self) -> ShapeSig:
        return self._main_out

    @property
    def expert_in(self) -> ShapeSig:
        return self._expert_in

    @property
    def expert_out(self) -> ShapeSig:
        return self._expert_out


def adapt_in(z: Tensor, adapter: AdapterPair) -> Tensor:
    if not adapter.source.matches(z.shape):
        raise ValueError(f"adapter expects {adapter.source}, got batch shape {z.shape}")
    return adapter.s_in(z)


def adapt_out(y: Tensor, adapter: AdapterPair, main_shape: ShapeSig | None = None) -> Tensor:
    """Map an expert output onto the main-path shape.

    ``main_shape`` only pins the target signature; no main-path features are mixed in.
    """
    if main_shape is not None and main_shape != adapter.target:
        raise ValueError(f"adapter was built for {adapter.target}, asked for {main_shape}")
    if not adapter.expert_out.matches(y.shape):
        raise ValueError(f"adapter expects expert output {adapter.expert_out}, got {y.shape}")
    return adapter.s_out(y)


def aggregate(outputs: Sequence[tuple]) -> Tensor:
    """Gating-weighted sum ``sum_k w_k * z_k``; weights may be scalars or per-sample tensors."""
    if not outputs:
        raise ValueError("aggregate needs at least one expert output")
    total = None
    for w, z in outputs:
        term = T.mul(z, w)
        total = term if total is None else T.add(total, term)
    return total
