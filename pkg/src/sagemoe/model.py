"""Miniature hybrid encoder-decoder segmentation model with a SAGE block per encoder stage.

Layout for the default configuration (3x32x32 input):

    stem conv3x3              -> [8, 32, 32]        (skip for the last decoder stage)
    layer 0  conv stage       -> [8, 16, 16]        (skip)
    layer 1  conv stage       -> [16, 8, 8]
    tokenizer (linear + pos)  -> [64 tokens, 32]
    layer 2  attention block  -> [64, 32]
    layer 3  attention block  -> [64, 32]
    decoder: up2x + skip + conv, twice -> [8, 32, 32]
    head 1x1                  -> [num_classes, 32, 32]
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import THETA_INIT, SageBlock
from .experts import ExpertPool, build_pool
from .layers import AttnBlock, ChannelLinear, Conv3x3, ConvBlock, Linear, Module, param
from .rng import Rng
from .routing import RouteResult, RoutingDecision
from .shapes import ShapeSig
from .tensor import NumericError, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 3
    height: int = 32
    width: int = 32
    conv_channels: tuple = (8, 16)
    token_dim: int = 32
    attn_layers: int = 2
    num_shared: int = 2
    top_k: int = 2
    gating: str = "sigmoid"
    num_classes: int = 2
    d_k: int = 16
    theta_init: float = THETA_INIT
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)

    @property
    def num_layers(self) -> int:
        return len(self.conv_channels) + self.attn_layers

    @property
    def num_experts(self) -> int:
        return self.num_shared + self.num_layers

    def validate(self) -> None:
        n = len(self.conv_channels)
        if n < 1 or self.attn_layers < 0:
            raise ConfigError("need at least one conv stage and a non-negative attention depth")
        if self.height != self.width:
            raise ConfigError(f"only square inputs are supported, got {self.height}x{self.width}")
        if self.height % (2**n):
            raise ConfigError(f"input size {self.height} is not divisible by 2^{n}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, M={self.num_experts}]")
        if self.gating not in ("softmax", "sigmoid"):
            raise ConfigError(f"unknown gating variant {self.gating!r}")
        if self.num_shared < 0 or self.num_classes < 2 or self.d_k < 1 or self.token_dim < 1:
            raise ConfigError("num_shared >= 0, num_classes >= 2, d_k >= 1 and token_dim >= 1 required")

    def to_text(self) -> str:
        """Canonical ``key = value`` block, keys sorted."""
        lines = []
        for key, value in sorted(dataclasses.asdict(self).items()):
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = _parse_field(key, value)
        return cls(**kwargs)


def _parse_field(key: str, value):
    if not isinstance(value, str):
        return value
    if key == "conv_channels":
        return tuple(int(v) for v in value.split(",") if v.strip())
    if key == "gating":
        return value
    if key == "theta_init":
        return float(value)
    return int(value)


class ConvStage(Module):
    """Main path of a conv layer: ConvBlock, then conv3x3 channel change and 2x nearest downsample."""

    def __init__(self, c_in: int, c_out: int, rng: Rng):
        self.block = ConvBlock(c_in, rng)
        self.transition = Conv3x3(c_in, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.downsample(self.transition(self.block(x)), 2)


class Tokenizer(Module):
    """[B, C, g, g] map -> [B, g*g, D] tokens with a learned position embedding."""

    def __init__(self, channels: int, dim: int, grid: int, rng: Rng):
        self.proj = Linear(channels, dim, rng)
        self.pos = param(rng.normal((grid * grid, dim), std=0.02))

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        tokens = T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, H * W, C))
        return T.add(self.proj(tokens), self.pos)


class DecoderStage(Module):
    def __init__(self, c_in: int, c_skip: int, c_out: int, rng: Rng):
        self._c_in, self._c_skip = c_in, c_skip
        self.conv = Conv3x3(c_in + c_skip, c_out, rng)

    @property
    def in_channels(self) -> int:
        return self._c_in + self._c_skip

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        up = T.upsample(x, 2)
        if up.shape[1] + skip.shape[1] != self.in_channels:
            raise ValueError("decoder skip channel mismatch")
        return T.silu(self.conv(T.concat([up, skip], axis=1)))


@dataclass
class Prediction:
    """Model output for one or more images.

    ``logits`` is ``[B, classes, H, W]``; ``decisions`` holds one batched
    ``RoutingDecision`` per SAGE layer.
    """

    logits: np.ndarray
    decisions: list

    def mask(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


@dataclass
class ForwardResult:
    logits: Tensor
    routes: list
    skips: list = field(default_factory=list, repr=False)

    def prediction(self) -> Prediction:
        return Prediction(self.logits.data.copy(), [r.decision for r in self.routes])


class SageUNet(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self._config = config
        rng = Rng.stream(config.seed, 0)
        chans = config.conv_channels
        n_conv = len(chans)
        H = config.height
        self.stem = Conv3x3(config.in_channels, chans[0], rng)

        stages, sigs = [], []
        c_prev, h = chans[0], H
        for c in chans:
            stages.append(ConvStage(c_prev, c, rng))
            sigs.append((ShapeSig.map(c_prev, h, h), ShapeSig.map(c, h // 2, h // 2)))
            c_prev, h = c, h // 2
        grid = h
        tok_sig = ShapeSig.tokens(grid * grid, config.token_dim)
        attn = [AttnBlock(config.token_dim, rng) for _ in range(config.attn_layers)]
        sigs += [(tok_sig, tok_sig)] * config.attn_layers
        self.tokenizer = Tokenizer(chans[-1], config.token_dim, grid, rng) if config.attn_layers else None

        backbone = [(s.block, sig[0]) for s, sig in zip(stages, sigs)]
        backbone += [(a, tok_sig) for a in attn]
        self.pool: ExpertPool = build_pool(backbone, config.num_shared, config.token_dim, rng)

        mains = stages + attn
        self.layers = [
            SageBlock(i, main, s_in, s_out, self.pool, config.top_k, config.gating, config.d_k, rng,
                      theta_init=config.theta_init)
            for i, (main, (s_in, s_out)) in enumerate(zip(mains, sigs))
        ]
        self._closure_check()

        # decoder mirrors the conv stages; skips come from the stem and all but the last conv stage
        skip_channels = [chans[0]] + list(chans[:-1])
        dec_out = list(reversed(chans))
        self.decoder = []
        c_in = config.token_dim if config.attn_layers else chans[-1]
        for s in range(n_conv):
            c_skip = skip_channels[n_conv - 1 - s]
            c_out = dec_out[s] if s + 1 < n_conv else chans[0]
            self.decoder.append(DecoderStage(c_in, c_skip, c_out, rng))
            c_in = c_out
        self.head = ChannelLinear(c_in, config.num_classes, rng)
        self._noise = [Rng.stream(config.seed, 1, i) for i in range(config.num_layers)]

    @property
    def config(self) -> ModelConfig:
        return self._config

    def reseed_noise(self, seed: int) -> None:
        self._noise = [Rng.stream(seed, 1, i) for i in range(len(self.layers))]

    def _closure_check(self) -> None:
        """Every (layer, expert) adapter chain must reach the layer's main-path output shape."""
        for layer in self.layers:
            for j, (expert, adapter) in enumerate(zip(self.pool, layer.adapters)):
                if adapter.source != layer.in_sig or adapter.target != layer.out_sig:
                    raise ConfigError(f"adapter ({layer.index}, {j}) has wrong endpoints")
                if not expert.native_in.layout == adapter.expert_in.layout:
                    raise ConfigError(f"adapter ({layer.index}, {j}) feeds the wrong layout")

    def __call__(self, x, mode: str = "eval", frozen_topk: list | None = None,
                 rngs: list | None = None) -> ForwardResult:
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        cfg = self._config
        if x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ValueError(f"expected images of shape {(cfg.in_channels, cfg.height, cfg.width)}, got {x.shape[1:]}")
        rngs = rngs if rngs is not None else self._noise
        n_conv = len(cfg.conv_channels)
        z = self.stem(x)
        skips = [z]
        routes: list[RouteResult] = []
        for i, layer in enumerate(self.layers):
            if i == n_conv:
                z = self.tokenizer(z)
            frozen = None if frozen_topk is None else frozen_topk[i]
            z, r = layer(z, mode=mode, rng=rngs[i] if mode == "train" else None, frozen_topk=frozen)
            if not np.isfinite(z.data).all():
                raise NumericError(f"non-finite activations after layer {i}")
            routes.append(r)
            if i < n_conv - 1:
                skips.append(z)
        if z.ndim == 3:
            B, n, D = z.shape
            g = int(round(n**0.5))
            z = T.reshape(T.transpose(z, (0, 2, 1)), (B, D, g, g))
        for stage, skip in zip(self.decoder, reversed(skips)):
            z = stage(z, skip)
        logits = self.head(z)
        if not np.isfinite(logits.data).all():
            raise NumericError("non-finite logits from the segmentation head")
        return ForwardResult(logits, routes, skips)

    def parameter_groups(self) -> dict[str, str]:
        """Parameter name -> group used for learning-rate schedules and reports."""
        groups = {}
        for name, _ in self.named_parameters():
            groups[name] = _group_of(name)
        return groups

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def _group_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "pool":
        return "shared_experts"
    if parts[0] == "layers":
        sub = parts[2]
        if sub == "main":
            if parts[3] == "block" or parts[3] not in ("transition",):
                # ConvBlocks and AttnBlocks double as fine-grained experts
                return "fine_experts"
            return "backbone"
        if sub == "router":
            return "routers"
        if sub == "adapters":
            return "adapters"
        if sub == "theta":
            return "fusion"
    if parts[0] in ("decoder", "head"):
        return "decoder"
    return "backbone"


def build(config: ModelConfig | None = None) -> SageUNet:
    return SageUNet(config or ModelConfig())


def predict(model: SageUNet, image) -> Prediction:
    """Eval-mode forward pass; deterministic."""
    return model(image, mode="eval").prediction()


def metrics(pred_mask, true_mask) -> tuple[float, float, float]:
    """(accuracy, IoU, Dice) for binary masks; IoU and Dice are 1 when both masks are empty."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(true_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    acc = np.count_nonzero(a == b) / a.size
    iou = 1.0 if union == 0 else inter / union
    dsc = 1.0 if total == 0 else 2.0 * inter / total
    return float(acc), float(iou), float(dsc)


def mean_metrics(pairs) -> tuple[float, float, float]:
    """Per-image metrics averaged over the set."""
    rows = [metrics(p, t) for p, t in pairs]
    if not rows:
        raise ValueError("no images to evaluate")
    return tuple(float(v) for v in np.mean(np.array(rows), axis=0))
