"""Seed-deterministic random streams.

A counter-based SplitMix64 generator: the n-th draw depends only on the seed
and n, so streams are identical across platforms and vectorise cleanly with
numpy's wrapping uint64 arithmetic. Gaussians come from the Box-Muller
transform applied to pairs of uniforms.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    return int(_mix(np.array([x & _MASK], dtype=np.uint64))[0])


class Rng:
    """Deterministic generator; ``state`` is the 64-bit SplitMix64 counter."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    @classmethod
    def stream(cls, seed: int, *keys: int) -> "Rng":
        """Independent sub-stream for ``(seed, *keys)``, e.g. one per layer index."""
        s = mix64(int(seed) ^ 0x5EED5EED5EED5EED)
        for key in keys:
            s = mix64(s ^ mix64(int(key) + _GAMMA))
        return cls(s)

    def random_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            out = _mix(z)
        self.state = (self.state + n * _GAMMA) & _MASK
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform samples in the half-open interval (0, 1]."""
        n = int(np.prod(shape, dtype=np.int64))
        u = ((self.random_u64(n) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform((2 * m,))
        r = np.sqrt(-2.0 * np.log(u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of random keys; stable so the result is fully determined
        return np.argsort(self.random_u64(n), kind="stable")

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        span = high - low
        return (low + (self.uniform((n,)) * span).astype(np.int64).clip(0, span - 1)).reshape(shape)
