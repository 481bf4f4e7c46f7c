"""Hierarchical router.

One decision per sample per layer, computed from the globally pooled layer
input ``zbar``:

* shared gate ``g_s = sigmoid(zbar . W_gate + b_gate)``
* affinity logits ``L = (zbar W_Q) K^T / sqrt(d_k) + softplus(zbar W_noise) * eps``
  (the noise term only in training mode)
* group modulation ``L' = L + log(g_s)`` on shared experts and ``L + log(1 - g_s)``
  on fine-grained ones
* top-K selection on ``L'`` and gate weights restricted to the selection.

All functions accept a leading batch axis.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Module, param
from .rng import Rng
from .tensor import Tensor

GS_CLAMP = 1e-7


class RouterParams(Module):
    def __init__(self, d: int, M: int, d_k: int, rng: Rng):
        if d_k <= 0:
            raise ValueError("key dimension d_k must be positive")
        self._d, self._M, self._dk = d, M, d_k
        self.w_gate = param(np.zeros((d, 1)))
        self.b_gate = param(np.zeros(1))
        self.w_query = param(rng.normal((d, d_k), std=1.0 / math.sqrt(d)))
        self.keys = param(rng.normal((M, d_k), std=1.0))
        self.w_noise = param(np.zeros((d, M)))

    @property
    def d(self) -> int:
        return self._d

    @property
    def M(self) -> int:
        return self._M

    @property
    def d_k(self) -> int:
        return self._dk


@dataclass
class RoutingDecision:
    """Audit trail of one routing call; arrays carry a leading batch axis."""

    g_s: np.ndarray
    base_logits: np.ndarray
    modulated_logits: np.ndarray
    topk_indices: np.ndarray
    gate_weights: np.ndarray
    noise_scale: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.g_s.shape[0]

    def probs(self) -> np.ndarray:
        """Full softmax over the modulated logits (the affinity row)."""
        z = self.modulated_logits - self.modulated_logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def sample(self, b: int) -> "RoutingDecision":
        return RoutingDecision(*(np.asarray(a)[b : b + 1] for a in (
            self.g_s, self.base_logits, self.modulated_logits,
            self.topk_indices, self.gate_weights, self.noise_scale,
        )))


def _check_finite(x: Tensor, what: str) -> None:
    if not np.isfinite(x.data).all():
        raise T.NumericError(f"non-finite {what}")


def shared_gate(zbar: Tensor, params: RouterParams) -> Tensor:
    """Scalar gate per sample in (0, 1); shape ``zbar.shape[:-1]``."""
    _check_finite(zbar, "pooled router input")
    if zbar.shape[-1] != params.d:
        raise ValueError(f"pooled dim {zbar.shape[-1]} does not match router dim {params.d}")
    a = T.add(T.matmul(zbar, params.w_gate), params.b_gate)
    return T.reshape(T.sigmoid(a), zbar.shape[:-1])


def sar_logits(zbar: Tensor, params: RouterParams, mode: str = "eval", rng: Rng | None = None,
               noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Affinity logits and the input-adaptive noise scale.

    In ``"train"`` mode the Gaussian perturbation is drawn from ``rng`` unless
    an explicit ``noise`` array is given.
    """
    if params.d_k <= 0:
        raise ValueError("d_k must be positive")
    _check_finite(zbar, "pooled router input")
    q = T.matmul(zbar, params.w_query)
    keys_t = T.transpose(params.keys, (1, 0))
    logits = T.mul(T.matmul(q, keys_t), 1.0 / math.sqrt(params.d_k))
    sigma = T.softplus(T.matmul(zbar, params.w_noise))
    if mode == "train":
        if noise is None:
            if rng is None:
                raise ValueError("training-mode routing needs an Rng")
            noise = rng.normal(sigma.shape)
        logits = T.add(logits, T.mul(sigma, noise))
    elif mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")
    return logits, sigma


def clamp_gate(g_s: Tensor) -> Tensor:
    return T.clip(g_s, GS_CLAMP, 1.0 - GS_CLAMP)


def modulate_logits(logits: Tensor, g_s: Tensor, shared_mask: np.ndarray) -> Tensor:
    """Add log(g_s) to shared experts' logits and log(1 - g_s) to the rest."""
    g_s = T.as_tensor(g_s)
    g = T.reshape(clamp_gate(g_s), g_s.shape + (1,))
    m = np.asarray(shared_mask, dtype=np.float64)
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("shared mask entries must be 0 or 1")
    bias = T.add(T.mul(T.log(g), m), T.mul(T.log(T.sub(1.0, g)), 1.0 - m))
    return T.add(logits, bias)


def select_topk(logits, K: int, tiebreak=None) -> np.ndarray:
    """Indices of the K largest entries along the last axis, in rank order.

    Equal values are ordered by ``tiebreak`` (larger first) when given, then by
    the lower index. Passing the unmodulated logits as ``tiebreak`` keeps ties
    that only exist because of rounding in ``L + log(g)`` from changing the
    selection. Works on a single vector or a batch of rows.
    """
    v = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    M = v.shape[-1]
    if not 1 <= K <= M:
        raise ValueError(f"top-K needs 1 <= K <= M, got K={K}, M={M}")
    if tiebreak is None:
        order = np.argsort(-v, axis=-1, kind="stable")
    else:
        order = np.lexsort((-np.asarray(tiebreak, dtype=np.float64), -v), axis=-1)
    return order[..., :K]


def brute_force_topk(logits, K: int) -> tuple[int, ...]:
    """Enumerate all C(M, K) subsets; best sum, lexicographically smallest on ties."""
    v = np.asarray(logits, dtype=np.float64)
    best, best_sum = None, -np.inf
    for subset in itertools.combinations(range(len(v)), K):
        s = float(np.sum(v[list(subset)]))
        if s > best_sum:
            best, best_sum = subset, s
    return best


def selection_mask(topk: np.ndarray, M: int) -> np.ndarray:
    topk = np.asarray(topk)
    mask = np.zeros(topk.shape[:-1] + (M,), dtype=bool)
    np.put_along_axis(mask, topk, True, axis=-1)
    return mask


def group_bias(g_s: np.ndarray, shared_mask: np.ndarray) -> np.ndarray:
    """The additive term of :func:`modulate_logits` as a plain array ``[..., M]``."""
    g = np.clip(np.asarray(g_s, dtype=np.float64), GS_CLAMP, 1.0 - GS_CLAMP)[..., None]
    m = np.asarray(shared_mask, dtype=np.float64)
    return np.log(g) * m + np.log(1.0 - g) * (1.0 - m)


def _selected_softmax(logits: Tensor, topk: np.ndarray, mask: np.ndarray, parts) -> Tensor:
    # Shift by the top-ranked expert using (base_j - base_ref) + (bias_j - bias_ref). When the
    # bias is the same for every expert the second term is exactly zero, so a uniform shift
    # leaves the weights bitwise unchanged.
    base, bias = parts if parts is not None else (logits.data, np.zeros_like(logits.data))
    ref = topk[..., :1]
    z = (base - np.take_along_axis(base, ref, -1)) + (bias - np.take_along_axis(bias, ref, -1))
    e = np.where(mask, np.exp(np.where(mask, z, -np.inf)), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)
    return T._make(s, (logits,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "gate_softmax")


def gate_weights(logits: Tensor, topk: np.ndarray, variant: str = "softmax", parts=None) -> Tensor:
    """Weights over the selected experts, zero elsewhere, summing to one per row.

    ``"softmax"``: softmax over the selected logits. ``"sigmoid"``: independent
    sigmoids of the selected logits, renormalised over the selection (uniform
    1/K if every sigmoid underflows). ``parts`` optionally gives ``(base, bias)``
    arrays with ``logits = base + bias``; the softmax then works from the
    unrounded decomposition. ``topk`` must be in rank order.
    """
    logits = T.as_tensor(logits)
    topk = np.asarray(topk)
    mask = selection_mask(topk, logits.shape[-1])
    if variant == "softmax":
        return _selected_softmax(logits, topk, mask, parts)
    if variant != "sigmoid":
        raise ValueError(f"unknown gating variant {variant!r}")
    raw = T.mul(T.sigmoid(logits), mask.astype(np.float64))
    dead = raw.data.sum(axis=-1, keepdims=True) == 0.0
    w = T.div(raw, T.add(T.sum(raw, axis=-1, keepdims=True), dead.astype(np.float64)))
    if dead.any():
        k = mask.sum(axis=-1, keepdims=True)
        w = T.add(w, np.where(dead & mask, 1.0 / k, 0.0))
    return w


@dataclass
class LoadBalanceStats:
    """Running f (hard assignment counts) and P (full-softmax probability sums).

    ``f`` is normalised by K so it is a probability vector. ``P`` may be a
    Tensor so the balance loss stays differentiable through the router.
    """

    M: int
    K: int
    assign_counts: np.ndarray = None
    prob_sum: object = None
    count: int = 0

    def __post_init__(self):
        if self.assign_counts is None:
            self.assign_counts = np.zeros(self.M)
        if self.prob_sum is None:
            self.prob_sum = np.zeros(self.M)

    def add(self, topk: np.ndarray, probs) -> None:
        topk = np.atleast_2d(np.asarray(topk))
        np.add.at(self.assign_counts, topk.ravel(), 1.0)
        if isinstance(probs, Tensor):
            batch = T.sum(probs, axis=0) if probs.ndim == 2 else probs
            self.prob_sum = T.add(self.prob_sum, batch)
        else:
            p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
            self.prob_sum = self.prob_sum + p.sum(axis=0)
        self.count += topk.shape[0]

    def merge(self, other: "LoadBalanceStats") -> "LoadBalanceStats":
        out = LoadBalanceStats(self.M, self.K, self.assign_counts + other.assign_counts,
                               T.add(self.prob_sum, other.prob_sum) if isinstance(self.prob_sum, Tensor)
                               or isinstance(other.prob_sum, Tensor) else self.prob_sum + other.prob_sum,
                               self.count + other.count)
        return out

    @property
    def f(self) -> np.ndarray:
        return self.assign_counts / (self.count * self.K)

    @property
    def P(self):
        if isinstance(self.prob_sum, Tensor):
            return T.mul(self.prob_sum, 1.0 / self.count)
        return self.prob_sum / self.count

    @classmethod
    def from_vectors(cls, f, P) -> "LoadBalanceStats":
        """Stats whose normalised f and P equal the given vectors (count 1, K 1)."""
        f = np.asarray(f, dtype=np.float64)
        return cls(len(f), 1, f.copy(), P if isinstance(P, Tensor) else np.asarray(P, dtype=np.float64), 1)


def load_balance_loss(stats: LoadBalanceStats):
    """``M * sum_j f_j P_j``; a Tensor when P is one, else a float."""
    if stats.count < 1:
        raise ValueError("load balance loss needs at least one routed sample")
    f, P = stats.f, stats.P
    if isinstance(P, Tensor):
        return T.mul(T.sum(T.mul(P, f)), float(stats.M))
    return float(stats.M * np.dot(f, P))


@dataclass
class RouteResult:
    """Differentiable pieces of one routing call plus its audit record."""

    decision: RoutingDecision
    weights: Tensor
    probs: Tensor
    g_s: Tensor
    modulated: Tensor = field(repr=False)


def route(zbar: Tensor, params: RouterParams, shared_mask: np.ndarray, K: int, variant: str,
          mode: str = "eval", rng: Rng | None = None, frozen_topk: np.ndarray | None = None) -> RouteResult:
    """Full hierarchical routing for a batch of pooled inputs ``[B, d]``.

    ``frozen_topk`` overrides the selection (used by gradient checking, where
    perturbations must not cross a top-K boundary).
    """
    g_s = shared_gate(zbar, params)
    logits, sigma = sar_logits(zbar, params, mode, rng)
    mod = modulate_logits(logits, g_s, shared_mask)
    topk = select_topk(mod, K, tiebreak=logits.data) if frozen_topk is None else np.asarray(frozen_topk)
    w = gate_weights(mod, topk, variant, parts=(logits.data, group_bias(g_s.data, shared_mask)))
    probs = T.softmax(mod, axis=-1)
    decision = RoutingDecision(
        g_s=g_s.data.copy(),
        base_logits=logits.data.copy(),
        modulated_logits=mod.data.copy(),
        topk_indices=topk.copy(),
        gate_weights=w.data.copy(),
        noise_scale=sigma.data.copy(),
    )
    return RouteResult(decision, w, probs, g_s, mod)
