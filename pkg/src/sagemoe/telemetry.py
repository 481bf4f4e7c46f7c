"""Routing telemetry: affinity heatmap, top-K activation bitmap, g_s trajectories, f/P statistics."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .data import write_netpbm
from .routing import LoadBalanceStats, RoutingDecision


class TelemetryLog:
    """Accumulates routing decisions per (layer, expert).

    ``kinds`` names each layer's family (``"conv"`` or ``"attn"``) for the g_s export.
    """

    def __init__(self, num_layers: int, num_experts: int, K: int, kinds: list[str] | None = None):
        self.L, self.M, self.K = num_layers, num_experts, K
        self.kinds = list(kinds) if kinds is not None else ["conv"] * num_layers
        self.affinity_sum = np.zeros((num_layers, num_experts))
        self.samples = np.zeros(num_layers, dtype=np.int64)
        self.bitmap = np.zeros((num_layers, num_experts), dtype=bool)
        self.balance = [LoadBalanceStats(num_experts, K) for _ in range(num_layers)]
        self.gs: dict[int, list[list[float]]] = {}
        self.epoch = 0

    @classmethod
    def for_model(cls, model) -> "TelemetryLog":
        cfg = model.config
        return cls(cfg.num_layers, cfg.num_experts, cfg.top_k, [layer.kind for layer in model.layers])

    def begin_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def record(self, decision: RoutingDecision, layer: int) -> None:
        if not 0 <= layer < self.L:
            raise IndexError(f"layer {layer} out of range [0, {self.L})")
        probs = decision.probs()
        topk = np.atleast_2d(decision.topk_indices)
        if probs.shape[-1] != self.M:
            raise ValueError(f"decision has {probs.shape[-1]} experts, log expects {self.M}")
        probs = np.atleast_2d(probs)
        self.affinity_sum[layer] += probs.sum(axis=0)
        self.samples[layer] += probs.shape[0]
        self.bitmap[layer, np.unique(topk)] = True
        self.balance[layer].add(topk, probs)
        series = self.gs.setdefault(self.epoch, [[] for _ in range(self.L)])
        series[layer].extend(np.atleast_1d(decision.g_s).tolist())

    def merge(self, other: "TelemetryLog") -> "TelemetryLog":
        out = TelemetryLog(self.L, self.M, self.K, self.kinds)
        out.affinity_sum = self.affinity_sum + other.affinity_sum
        out.samples = self.samples + other.samples
        out.bitmap = self.bitmap | other.bitmap
        out.balance = [a.merge(b) for a, b in zip(self.balance, other.balance)]
        for src in (self.gs, other.gs):
            for epoch, rows in src.items():
                dst = out.gs.setdefault(epoch, [[] for _ in range(self.L)])
                for i, vals in enumerate(rows):
                    dst[i].extend(vals)
        return out

    def affinity(self) -> np.ndarray:
        """Mean full-softmax routing probability per (layer, expert); rows sum to 1."""
        if not self.samples.all():
            raise ValueError("every layer needs at least one recorded decision")
        return self.affinity_sum / self.samples[:, None]

    def activation(self) -> np.ndarray:
        return self.bitmap.astype(np.float64)

    def unused_experts(self) -> list[list[int]]:
        return [np.nonzero(~row)[0].tolist() for row in self.bitmap]

    def balance_losses(self) -> list[float]:
        from .routing import load_balance_loss

        return [load_balance_loss(s) for s in self.balance]

    def gs_table(self) -> list[tuple[int, int, str, float, float]]:
        rows = []
        for epoch in sorted(self.gs):
            for layer, vals in enumerate(self.gs[epoch]):
                if vals:
                    a = np.asarray(vals)
                    rows.append((epoch, layer, self.kinds[layer], float(a.mean()), float(a.std())))
        return rows


def _matrix_csv(matrix: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "expert", "value"])
    for (layer, expert), v in np.ndenumerate(matrix):
        w.writerow([layer, expert, repr(float(v))])
    return buf.getvalue()


def export_heatmap(log: TelemetryLog, kind: str, path) -> Path:
    """Write ``layer,expert,value`` CSV plus a PGM rendering (value * 255) next to it."""
    if kind == "affinity":
        matrix = log.affinity()
    elif kind == "activation":
        if not log.samples.any():
            raise ValueError("no recorded decisions")
        matrix = log.activation()
    else:
        raise ValueError(f"unknown heatmap kind {kind!r}")
    path = Path(path)
    path.write_text(_matrix_csv(matrix))
    write_netpbm(path.with_suffix(".pgm"), np.round(np.clip(matrix, 0.0, 1.0) * 255.0).astype(np.uint8))
    return path


def read_heatmap(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    L = max(int(r["layer"]) for r in rows) + 1
    M = max(int(r["expert"]) for r in rows) + 1
    out = np.zeros((L, M))
    for r in rows:
        out[int(r["layer"]), int(r["expert"])] = float(r["value"])
    return out


def export_gs(log: TelemetryLog, path) -> Path:
    """``epoch,layer,kind,mean_gs,std_gs`` with population standard deviation."""
    rows = log.gs_table()
    if not rows:
        raise ValueError("no g_s values recorded")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "layer", "kind", "mean_gs", "std_gs"])
    for epoch, layer, kind, m, s in rows:
        w.writerow([epoch, layer, kind, repr(m), repr(s)])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path
