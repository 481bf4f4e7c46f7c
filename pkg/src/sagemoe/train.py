"""Losses, optimiser and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ForwardResult, SageUNet, metrics
from .rng import Rng
from .routing import LoadBalanceStats, load_balance_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    dice: float = 1.5
    lb: float = 1.0

    def __post_init__(self):
        if min(self.ce, self.dice, self.lb) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainPlan:
    """Optimisation schedule.

    Stage 1 uses ``lr`` for every parameter. Stage 2 (discriminative
    fine-tuning) gives the shared experts ``shared_lr`` and everything else ``lr``.
    """

    stage: int = 1
    lr: float = 3e-3
    shared_lr: float = 1.5e-2
    epochs: int = 30
    batch_size: int = 8
    weight_decay: float = 0.0
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0 or self.shared_lr < 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and non-negative rates required")

    def lr_for(self, group: str) -> float:
        if self.stage == 2 and group == "shared_experts":
            return self.shared_lr
        return self.lr

    @classmethod
    def full_scale(cls, stage: int, **kw) -> "TrainPlan":
        """Full-scale rates: 1e-5 everywhere in stage 1; 5e-5 for shared experts in stage 2."""
        return cls(stage=stage, lr=1e-5, shared_lr=5e-5, **kw)


# ---------------------------------------------------------------- losses


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """[..., H, W] class indices -> [..., C, H, W] one-hot (class axis before the spatial axes)."""
    mask = np.asarray(mask, dtype=np.int64)
    oh = np.eye(num_classes)[mask]  # [..., H, W, C]
    return np.moveaxis(oh, -1, -3)


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy; ``logits`` [B, C, H, W] (or [C, H, W]), ``target`` class indices."""
    logits = T.as_tensor(logits)
    axis = logits.ndim - 3
    oh = one_hot(target, logits.shape[axis])
    if oh.shape != logits.shape:
        raise ValueError(f"target shape {np.shape(target)} does not match logits {logits.shape}")
    n = oh.size / logits.shape[axis]
    return T.mul(T.sum(T.mul(T.log_softmax(logits, axis=axis), oh)), -1.0 / n)


def dice_loss(probs: Tensor, target_onehot: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss ``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`` averaged over foreground classes."""
    probs = T.as_tensor(probs)
    g = np.asarray(target_onehot, dtype=np.float64)
    if g.shape != probs.shape:
        raise ValueError(f"target shape {g.shape} does not match probabilities {probs.shape}")
    axis = probs.ndim - 3
    C = probs.shape[axis]
    if C < 2:
        raise ValueError("dice loss needs a background and at least one foreground class")
    reduce = tuple(a for a in range(probs.ndim) if a != axis)
    inter = T.sum(T.mul(probs, g), axis=reduce)
    psum = T.sum(probs, axis=reduce)
    gsum = g.sum(axis=reduce)
    ratio = T.div(T.add(T.mul(inter, 2.0), eps), T.add(T.add(psum, gsum), eps))
    fg = T.getitem(ratio, slice(1, None))
    return T.sub(1.0, T.mean(fg))


@dataclass
class LossParts:
    total: Tensor
    ce: float
    dice: float
    balance: float


def balance_loss(result: ForwardResult, M: int, K: int) -> Tensor:
    """Per-layer ``M * sum f_j P_j`` over the batch, averaged over layers."""
    terms = []
    for r in result.routes:
        stats = LoadBalanceStats(M, K)
        stats.add(r.decision.topk_indices, r.probs)
        terms.append(load_balance_loss(stats))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(terms))


def total_loss(result: ForwardResult, target: np.ndarray, weights: LossWeights, M: int, K: int) -> LossParts:
    target = np.asarray(target)
    if target.shape[0] == 0:
        raise ValueError("empty batch")
    logits = result.logits
    ce = ce_loss(logits, target)
    dice = dice_loss(T.softmax(logits, axis=1), one_hot(target, logits.shape[1]))
    bal = balance_loss(result, M, K)
    total = T.add(T.add(T.mul(ce, weights.ce), T.mul(dice, weights.dice)), T.mul(bal, weights.lb))
    return LossParts(total, ce.item(), dice.item(), bal.item())


# ---------------------------------------------------------------- optimiser


class AdamW:
    """Adam moments with decoupled weight decay and per-parameter learning rates."""

    def __init__(self, params: list, lrs: list[float], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, lr, m, v in zip(self.params, self.lrs, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr == 0.0:
                continue
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(model: SageUNet, plan: TrainPlan) -> AdamW:
    named = model.named_parameters()
    groups = model.parameter_groups()
    lrs = [plan.lr_for(groups[name]) for name, _ in named]
    return AdamW([p for _, p in named], lrs, plan.betas, plan.eps, plan.weight_decay)


# ---------------------------------------------------------------- loop


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: dict, history: list):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass
class EpochStats:
    epoch: int
    split: str
    loss_total: float
    loss_ce: float
    loss_dice: float
    loss_balance: float
    acc: float
    iou: float
    dsc: float
    mean_gs: list

    def csv_row(self) -> list[str]:
        vals = [self.loss_total, self.loss_ce, self.loss_dice, self.loss_balance, self.acc, self.iou, self.dsc]
        return [str(self.epoch), self.split] + [repr(float(v)) for v in vals] + [repr(float(g)) for g in self.mean_gs]


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_state: dict | None = None
    best_dsc: float = -1.0
    best_epoch: int = -1


class _Accumulator:
    def __init__(self, num_layers: int):
        self.n = 0
        self.sums = np.zeros(4)
        self.metric_rows: list = []
        self.gs: list[list[float]] = [[] for _ in range(num_layers)]

    def add(self, parts: LossParts, batch: int, logits: np.ndarray, masks: np.ndarray, decisions) -> None:
        self.sums += batch * np.array([parts.total.item(), parts.ce, parts.dice, parts.balance])
        self.n += batch
        pred = np.argmax(logits, axis=1)
        for p, t in zip(pred, masks):
            self.metric_rows.append(metrics(p == 1, t == 1))
        for i, d in enumerate(decisions):
            self.gs[i].extend(d.g_s.tolist())

    def finish(self, epoch: int, split: str) -> EpochStats:
        losses = self.sums / max(self.n, 1)
        mets = np.mean(np.array(self.metric_rows), axis=0) if self.metric_rows else np.zeros(3)
        return EpochStats(epoch, split, *losses.tolist(), *mets.tolist(),
                          mean_gs=[float(np.mean(g)) if g else float("nan") for g in self.gs])


def _stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def evaluate(model: SageUNet, samples, weights: LossWeights | None = None, batch_size: int = 16,
             epoch: int = 0, split: str = "val", telemetry=None) -> EpochStats:
    """Eval-mode pass; metrics are computed per image and averaged."""
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    weights = weights or LossWeights()
    cfg = model.config
    acc = _Accumulator(len(model.layers))
    for start in range(0, len(samples), batch_size):
        x, y = _stack(samples[start : start + batch_size])
        result = model(x, mode="eval")
        parts = total_loss(result, y, weights, cfg.num_experts, cfg.top_k)
        decisions = [r.decision for r in result.routes]
        acc.add(parts, len(x), result.logits.data, y, decisions)
        if telemetry is not None:
            for i, d in enumerate(decisions):
                telemetry.record(d, i)
    return acc.finish(epoch, split)


def train(model: SageUNet, train_set, val_set, plan: TrainPlan, weights: LossWeights | None = None,
          telemetry=None) -> TrainResult:
    """Mini-batch training; keeps the parameters with the best validation Dice.

    Telemetry, when given, records the training-pass routing decisions, one
    telemetry epoch per training epoch.
    """
    if not train_set:
        raise ValueError("training set is empty")
    weights = weights or LossWeights()
    cfg = model.config
    model.reseed_noise(plan.seed)
    opt = make_optimizer(model, plan)
    result = TrainResult()
    last_good = model.state_dict()
    n = len(train_set)
    for epoch in range(plan.epochs):
        order = Rng.stream(plan.seed, 2, epoch).permutation(n)
        acc = _Accumulator(len(model.layers))
        if telemetry is not None:
            telemetry.begin_epoch(epoch)
        for start in range(0, n, plan.batch_size):
            batch = [train_set[i] for i in order[start : start + plan.batch_size]]
            x, y = _stack(batch)
            try:
                out = model(x, mode="train")
                parts = total_loss(out, y, weights, cfg.num_experts, cfg.top_k)
            except T.NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, result.history) from exc
            if not np.isfinite(parts.total.item()):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", last_good, result.history)
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            decisions = [r.decision for r in out.routes]
            acc.add(parts, len(batch), out.logits.data, y, decisions)
            if telemetry is not None:
                for i, d in enumerate(decisions):
                    telemetry.record(d, i)
        if not all(np.isfinite(p.data).all() for p in model.parameters()):
            raise TrainingDiverged(f"parameters became non-finite at epoch {epoch}", last_good, result.history)
        last_good = model.state_dict()
        result.history.append(acc.finish(epoch, "train"))
        if val_set:
            val = evaluate(model, val_set, weights, epoch=epoch)
            result.history.append(val)
            score = val.dsc
        else:
            score = result.history[-1].dsc
        if score > result.best_dsc:
            result.best_dsc, result.best_epoch = score, epoch
            result.best_state = model.state_dict()
        log.info("epoch %d train loss %.4f val dsc %.4f", epoch, result.history[-2 if val_set else -1].loss_total, score)
    if result.best_state is None:
        result.best_state = model.state_dict()
    return result


def history_csv(history: list, num_layers: int) -> str:
    header = ["epoch", "split", "loss_total", "loss_ce", "loss_dice", "loss_balance", "acc", "iou", "dsc"]
    header += [f"mean_gs_layer_{i}" for i in range(num_layers)]
    lines = [",".join(header)] + [",".join(row.csv_row()) for row in history]
    return "\n".join(lines) + "\n"


def two_stage(model: SageUNet, train_set, val_set, stage1: TrainPlan, stage2: TrainPlan,
              weights: LossWeights | None = None, telemetry=None) -> tuple[TrainResult, TrainResult]:
    """Uniform-rate stage followed by discriminative fine-tuning from the stage-1 best state."""
    if stage1.stage != 1 or stage2.stage != 2:
        raise ValueError("two_stage needs a stage-1 plan followed by a stage-2 plan")
    first = train(model, train_set, val_set, stage1, weights, telemetry)
    model.load_state_dict(first.best_state)
    second = train(model, train_set, val_set, stage2, weights, telemetry)
    return first, second
