"""Dual-path layer: backbone main path plus a routed expert path, fused by a learned scalar."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .experts import ExpertPool, run_expert
from .hub import AdapterPair, adapt_in, adapt_out
from .layers import Module, param
from .rng import Rng
from .routing import RouteResult, RouterParams, route
from .shapes import ShapeSig
from .tensor import Tensor

THETA_INIT = 2.0


class SageBlock(Module):
    """One layer ``z_i = a * main(z) + (1 - a) * sum_k w_k S_out(e_k(S_in(z)))`` with ``a = sigmoid(theta)``.

    ``main`` is the backbone transform for this layer. Adapters exist for every
    expert in the pool and are built eagerly so the parameter set does not
    depend on which experts happen to be routed to.
    """

    def __init__(self, index: int, main: Module, in_sig: ShapeSig, out_sig: ShapeSig, pool: ExpertPool,
                 K: int, variant: str, d_k: int, rng: Rng, theta_init: float = THETA_INIT):
        if not 1 <= K <= pool.M:
            raise ValueError(f"top-K must satisfy 1 <= K <= M={pool.M}, got {K}")
        self._index = index
        self._pool = pool
        self._K = K
        self._variant = variant
        self._in_sig = in_sig
        self._out_sig = out_sig
        self.main = main
        self.theta = param(np.array([theta_init]))
        self.router = RouterParams(in_sig.dim, pool.M, d_k, rng)
        self.adapters = [
            AdapterPair(in_sig, e.native_in, e.native_out, out_sig, rng) for e in pool
        ]

    @property
    def index(self) -> int:
        return self._index

    @property
    def K(self) -> int:
        return self._K

    @property
    def kind(self) -> str:
        return "conv" if self._in_sig.layout == "map" else "attn"

    @property
    def in_sig(self) -> ShapeSig:
        return self._in_sig

    @property
    def out_sig(self) -> ShapeSig:
        return self._out_sig

    @property
    def alpha(self) -> float:
        return float(T._sigmoid(self.theta.data)[0])

    def pooled(self, z: Tensor) -> Tensor:
        return T.global_mean_pool(z, "map" if self._in_sig.layout == "map" else "tokens")

    def expert_path(self, z: Tensor, result: RouteResult) -> Tensor:
        B = z.shape[0]
        topk = result.decision.topk_indices
        total = None
        for j in np.unique(topk):
            rows = np.nonzero((topk == j).any(axis=-1))[0]
            everyone = len(rows) == B
            x = z if everyone else T.getitem(z, rows)
            adapter = self.adapters[j]
            y = adapt_out(run_expert(self._pool, int(j), adapt_in(x, adapter)), adapter)
            w = T.getitem(result.weights, (rows, int(j)))
            term = T.mul(y, T.reshape(w, (len(rows),) + (1,) * (y.ndim - 1)))
            if not everyone:
                term = T.scatter_rows(term, rows, B)
            total = term if total is None else T.add(total, term)
        return total

    def __call__(self, z: Tensor, mode: str = "eval", rng: Rng | None = None,
                 frozen_topk: np.ndarray | None = None) -> tuple[Tensor, RouteResult]:
        if not self._in_sig.matches(z.shape):
            raise ValueError(f"layer {self._index} expects {self._in_sig}, got batch shape {z.shape}")
        z_main = self.main(z)
        result = route(self.pooled(z), self.router, self._pool.shared_mask, self._K, self._variant,
                       mode=mode, rng=rng, frozen_topk=frozen_topk)
        z_expert = self.expert_path(z, result)
        alpha = T.sigmoid(self.theta)
        fused = T.add(T.mul(z_main, alpha), T.mul(z_expert, T.sub(1.0, alpha)))
        return fused, result
