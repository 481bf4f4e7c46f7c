"""The global expert pool: shared MLP experts followed by the backbone's own blocks."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .layers import AttnBlock, ConvBlock, Module, SharedMlp
from .rng import Rng
from .shapes import ShapeSig
from .tensor import Tensor


class ExpertKind(enum.Enum):
    SHARED_MLP = "shared"
    CONV_BLOCK = "conv"
    ATTN_BLOCK = "attn"

    @property
    def is_shared(self) -> bool:
        return self is ExpertKind.SHARED_MLP


_KIND_OF = {SharedMlp: ExpertKind.SHARED_MLP, ConvBlock: ExpertKind.CONV_BLOCK, AttnBlock: ExpertKind.ATTN_BLOCK}


@dataclass
class Expert:
    id: int
    kind: ExpertKind
    native_in: ShapeSig
    native_out: ShapeSig
    module: Module


class ExpertPool(Module):
    def __init__(self, experts: list[Expert]):
        self._experts = experts
        # only the shared MLPs own parameters; fine-grained experts alias the backbone
        self.shared = [e.module for e in experts if e.kind.is_shared]

    def __len__(self) -> int:
        return len(self._experts)

    def __getitem__(self, i: int) -> Expert:
        return self._experts[i]

    def __iter__(self):
        return iter(self._experts)

    @property
    def M(self) -> int:
        return len(self._experts)

    @property
    def S(self) -> int:
        return len(self.shared)

    @property
    def shared_mask(self) -> np.ndarray:
        return np.array([1.0 if e.kind.is_shared else 0.0 for e in self._experts])


def build_pool(backbone: list[tuple[Module, ShapeSig]], num_shared: int, hidden_dim: int, rng: Rng) -> ExpertPool:
    """Shared experts first (ids 0..S-1), then one expert per backbone block in order.

    ``backbone`` pairs each block with its native input signature; blocks are
    shape preserving, so the native output signature is the same.
    """
    if num_shared < 0:
        raise ValueError("number of shared experts must be >= 0")
    if not backbone:
        raise ValueError("backbone needs at least one block")
    if num_shared > 0 and hidden_dim <= 0:
        raise ValueError("shared experts need a positive hidden dim")
    experts: list[Expert] = []
    for i in range(num_shared):
        sig = ShapeSig.tokens(None, hidden_dim)
        experts.append(Expert(i, ExpertKind.SHARED_MLP, sig, sig, SharedMlp(hidden_dim, hidden_dim, rng)))
    for block, sig in backbone:
        kind = _KIND_OF[type(block)]
        experts.append(Expert(len(experts), kind, sig, sig, block))
    return ExpertPool(experts)


def run_expert(pool: ExpertPool, expert_id: int, x: Tensor) -> Tensor:
    """Run one expert on an already shape-adapted batch ``[B, ...]``."""
    expert = pool[expert_id]
    if not expert.native_in.matches(x.shape):
        raise ValueError(
            f"expert {expert_id} ({expert.kind.value}) expects {expert.native_in}, got batch shape {x.shape}"
        )
    return expert.module(x)
