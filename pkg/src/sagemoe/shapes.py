"""Per-sample feature shape signatures (batch axis excluded)."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ShapeSig:
    """``layout`` is ``"map"`` with extents (C, H, W) or ``"tokens"`` with (T, D).

    A tokens signature with ``T = None`` accepts any sequence length (the
    shared MLP experts are per-token and have no native length).
    """

    layout: str
    extents: tuple

    def __post_init__(self):
        if self.layout not in ("map", "tokens"):
            raise ValueError(f"unknown layout {self.layout!r}")
        want = 3 if self.layout == "map" else 2
        if len(self.extents) != want:
            raise ValueError(f"{self.layout} signature needs {want} extents, got {self.extents}")
        for e in self.extents:
            if e is not None and e <= 0:
                raise ValueError(f"extents must be positive, got {self.extents}")

    @classmethod
    def map(cls, c: int, h: int, w: int) -> "ShapeSig":
        return cls("map", (c, h, w))

    @classmethod
    def tokens(cls, t: int | None, d: int) -> "ShapeSig":
        return cls("tokens", (t, d))

    @property
    def dim(self) -> int:
        """Channel or embedding dimension."""
        return self.extents[0] if self.layout == "map" else self.extents[1]

    @property
    def grid(self) -> int | None:
        """Side of the square spatial grid (token sequences are raster grids)."""
        if self.layout == "map":
            return self.extents[1]
        t = self.extents[0]
        if t is None:
            return None
        g = math.isqrt(t)
        if g * g != t:
            raise ValueError(f"token count {t} is not a square grid")
        return g

    def matches(self, shape: tuple) -> bool:
        """Does a batched array shape ``[B, ...]`` fit this signature?"""
        if len(shape) != len(self.extents) + 1:
            return False
        return all(e is None or e == s for e, s in zip(self.extents, shape[1:]))
