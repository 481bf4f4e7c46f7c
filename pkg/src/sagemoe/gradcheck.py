"""Finite-difference verification of the full model's analytic gradients.

The top-K selection of every layer is recorded once and then held fixed, so
perturbations only move along the differentiable path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, SageUNet
from .rng import Rng
from .train import LossWeights, total_loss

REL_TOL = 1e-4
STEP = 1e-5
# gradients below this magnitude are compared on an absolute scale
ABS_FLOOR = 1e-6


@dataclass
class GroupReport:
    group: str
    max_rel_error: float
    checked: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradcheck_model(config: ModelConfig | None = None, size: int = 4, probes: int = 6, step: float = STEP,
                    seed: int = 0, weights: LossWeights | None = None) -> list[GroupReport]:
    """Check every parameter group on a ``size`` x ``size``, single-image batch.

    Each parameter tensor contributes up to ``probes`` coordinates, chosen
    deterministically from ``seed``; small tensors are checked exhaustively.
    """
    base = config or ModelConfig()
    cfg = dataclasses.replace(base, height=size, width=size, seed=seed)
    model = SageUNet(cfg)
    weights = weights or LossWeights()
    rng = Rng.stream(seed, 11)
    x = rng.uniform((1, cfg.in_channels, size, size))
    y = rng.integers(0, cfg.num_classes, (1, size, size))
    # push parameters away from their structured init so no term is trivially zero
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(p.shape, std=0.05)

    first = model(x, mode="eval")
    frozen = [r.decision.topk_indices.copy() for r in first.routes]

    def loss_value() -> float:
        out = model(x, mode="eval", frozen_topk=frozen)
        return total_loss(out, y, weights, cfg.num_experts, cfg.top_k).total.item()

    model.zero_grad()
    out = model(x, mode="eval", frozen_topk=frozen)
    total_loss(out, y, weights, cfg.num_experts, cfg.top_k).total.backward()

    groups = model.parameter_groups()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= probes else np.sort(rng.permutation(n)[:probes])
        errs = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            errs.append(relative_error(np.array([analytic.reshape(-1)[i]]), np.array([numeric]))[0])
        g = groups[name]
        worst[g] = max(worst.get(g, 0.0), max(errs))
        counts[g] = counts.get(g, 0) + len(idx)
    return [GroupReport(g, worst[g], counts[g]) for g in sorted(worst)]


def passed(reports: list[GroupReport], tol: float = REL_TOL) -> bool:
    return all(r.max_rel_error < tol for r in reports)
