"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import ConfigError, RunConfig, build_run_config, load_run_config, parse_overrides
from .data import PatchRule, filter_directory, load_dataset, save_dataset, split_samples, synth_blobs
from .gradcheck import REL_TOL, gradcheck_model, passed
from .model import SageUNet, mean_metrics, predict
from .telemetry import TelemetryLog, export_gs, export_heatmap
from .train import TrainingDiverged, evaluate, history_csv, train

log = logging.getLogger("sagemoe")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="run configuration file (key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="random seed")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="sagemoe", description="Routed-expert segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train", parents=[common], help="train a model")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p = sub.add_parser("inspect-routing", parents=[common], help="export routing telemetry for a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p = sub.add_parser("filter-patches", parents=[common], help="apply the tissue patch filter")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic blob dataset")
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    return parser


def _run_config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config is not None:
        cfg = load_run_config(args.config, overrides)
    else:
        cfg = build_run_config(overrides)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _datasets(cfg: RunConfig):
    if cfg.data_dir is not None:
        splits = load_dataset(cfg.data_dir)
        return splits["train"], splits["val"]
    m = cfg.model
    return split_samples(synth_blobs(cfg.synth_n, m.height, m.width, cfg.seed), cfg.seed)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_set, val_set = _datasets(cfg)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    model = SageUNet(cfg.model)
    tele = TelemetryLog.for_model(model)
    try:
        result = train(model, train_set, val_set, cfg.plan, cfg.weights, telemetry=tele)
    except TrainingDiverged as exc:
        checkpoint.save(out / "last_good.ckpt", model, exc.last_good)
        (out / "history.csv").write_text(history_csv(exc.history, len(model.layers)))
        print(f"training diverged: {exc}; last good checkpoint written to {out / 'last_good.ckpt'}", file=sys.stderr)
        return 2
    (out / "history.csv").write_text(history_csv(result.history, len(model.layers)))
    checkpoint.save(out / "best.ckpt", model, result.best_state)
    export_heatmap(tele, "affinity", out / "affinity.csv")
    export_heatmap(tele, "activation", out / "activation.csv")
    export_gs(tele, out / "gs.csv")
    print(f"best validation DSC {result.best_dsc:.4f} at epoch {result.best_epoch}")
    print(f"unused experts per layer: {tele.unused_experts()}")
    return 0


def _load_eval_inputs(args):
    model = checkpoint.load(args.checkpoint)
    splits = load_dataset(args.data)
    return model, splits


def cmd_eval(args) -> int:
    if not args.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model, splits = _load_eval_inputs(args)
    if not any(splits.values()):
        print(f"dataset {args.data} is empty", file=sys.stderr)
        return 1
    for name, samples in splits.items():
        if not samples:
            continue
        pairs = [(predict(model, s.image).mask()[0] == 1, s.mask == 1) for s in samples]
        acc, iou, dsc = mean_metrics(pairs)
        print(f"{name} n={len(samples)} acc={acc:.6f} iou={iou:.6f} dsc={dsc:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    reports = gradcheck_model(cfg.model, seed=cfg.seed)
    for r in reports:
        status = "ok" if r.max_rel_error < REL_TOL else "FAIL"
        print(f"{r.group:16s} max_rel_error={r.max_rel_error:.3e} checked={r.checked} {status}")
    return 0 if passed(reports) else 2


def cmd_inspect_routing(args) -> int:
    if not args.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model, splits = _load_eval_inputs(args)
    samples = splits["train"] + splits["val"]
    if not samples:
        print(f"dataset {args.data} is empty", file=sys.stderr)
        return 1
    out = args.out or Path("routing")
    out.mkdir(parents=True, exist_ok=True)
    tele = TelemetryLog.for_model(model)
    evaluate(model, samples, telemetry=tele)
    export_heatmap(tele, "affinity", out / "affinity.csv")
    export_heatmap(tele, "activation", out / "activation.csv")
    export_gs(tele, out / "gs.csv")
    print(f"routing telemetry for {len(samples)} images written to {out}")
    return 0


_RULE_TYPES = {"sigma_min": float, "mu_max": float, "mask_min": float, "patch": int, "stride": int}


def cmd_filter_patches(args) -> int:
    overrides = parse_overrides(args.set)
    unknown = sorted(set(overrides) - set(_RULE_TYPES))
    if unknown:
        raise ConfigError(f"unknown patch rule keys: {', '.join(unknown)}")
    rule = PatchRule(**{k: _RULE_TYPES[k](v) for k, v in overrides.items()})
    for d in (args.images, args.masks):
        if not d.is_dir():
            raise ConfigError(f"directory not found: {d}")
    kept, rejected = filter_directory(args.images, args.masks, rule)
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "kept.txt").write_text("".join(line + "\n" for line in kept))
    print(f"kept {len(kept)} rejected {rejected}")
    return 0


def cmd_synth(args) -> int:
    seed = 42 if args.seed is None else args.seed
    if args.out is None:
        raise ConfigError("synth needs --out")
    samples = synth_blobs(args.n, args.height, args.width, seed)
    save_dataset(args.out, samples, seed)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect-routing": cmd_inspect_routing,
    "filter-patches": cmd_filter_patches,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
