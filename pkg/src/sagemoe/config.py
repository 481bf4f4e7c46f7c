"""Run configuration: flat UTF-8 ``key = value`` files with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import ConfigError, ModelConfig
from .train import LossWeights, TrainPlan

MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"seed"}
PLAN_KEYS = {"stage", "lr", "shared_lr", "epochs", "batch_size", "weight_decay"}
WEIGHT_KEYS = {"lambda_ce": "ce", "lambda_dice": "dice", "lambda_lb": "lb"}
OTHER_KEYS = {"seed", "out_dir", "data_dir", "synth_n"}
ALL_KEYS = MODEL_KEYS | PLAN_KEYS | set(WEIGHT_KEYS) | OTHER_KEYS


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 42
    out_dir: Path = Path("runs/toy")
    data_dir: Path | None = None
    synth_n: int = 250


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def build_run_config(pairs: dict[str, str], base_dir: Path | None = None) -> RunConfig:
    unknown = sorted(set(pairs) - ALL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    base_dir = base_dir or Path.cwd()
    try:
        seed = int(pairs.get("seed", 42))
        model_kw = {k: v for k, v in pairs.items() if k in MODEL_KEYS}
        model = ModelConfig.from_mapping({**model_kw, "seed": seed})
        model.validate()
        plan_kw = {}
        for k in PLAN_KEYS & set(pairs):
            plan_kw[k] = int(pairs[k]) if k in ("stage", "epochs", "batch_size") else float(pairs[k])
        plan = TrainPlan(seed=seed, **plan_kw)
        weights = LossWeights(**{WEIGHT_KEYS[k]: float(v) for k, v in pairs.items() if k in WEIGHT_KEYS})
        synth_n = int(pairs.get("synth_n", 250))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else (base_dir / path)

    return RunConfig(
        model=model,
        plan=plan,
        weights=weights,
        seed=seed,
        out_dir=resolve(pairs.get("out_dir", "runs/toy")),
        data_dir=resolve(pairs["data_dir"]) if pairs.get("data_dir") else None,
        synth_n=synth_n,
    )


def load_run_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse a config file; relative paths resolve against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = parse_pairs(path.read_text(encoding="utf-8"), str(path))
    pairs.update(overrides or {})
    return build_run_config(pairs, path.parent)
