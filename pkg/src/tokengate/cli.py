"""Command-line entry point: ``tokengate {train,sweep,flops,eval,export-masks}``.

Exit codes: 0 success, 2 usage/config/input errors, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_override
from .encoder import ConfigError, Encoder
from .flops import FULL_SCALE_DIMS, gamma_schedule, model_flops
from .harness.checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .harness.data import generate_synthetic
from .harness.train import DivergenceError, evaluate, export_mask_histogram, train

log = logging.getLogger("tokengate")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

FLAG_KEYS = {
    "gamma": "model.gamma",
    "alpha": "model.alpha",
    "lambda_filter": "model.lambda_filter",
    "lambda_bi": "model.lambda_bi",
    "filter_target_mode": "model.filter_target_mode",
    "attention_exclusion": "model.attention_exclusion",
    "epochs": "train.epochs",
}


class UsageError(Exception):
    pass


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (sections: model, task, train)")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda-filter", type=float)
    p.add_argument("--lambda-bi", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="seeds both model init and data generation")
    p.add_argument("--filter-target-mode", choices=["per_block", "paper_literal"])
    p.add_argument("--attention-exclusion", choices=["additive_mask", "literal"])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. --set model.hidden=64 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokengate", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one gated model")
    _add_run_flags(p)

    p = sub.add_parser("sweep", help="train one model per gamma and summarize")
    _add_run_flags(p)
    p.add_argument("--gammas", required=True, help="comma-separated gamma values")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("flops", help="analytic FLOPs report")
    p.add_argument("--paper-dims", action="store_true", help="L=12, I=128, J=768")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--hidden", type=int, default=32)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--counts", help="comma-separated active counts, one per block")
    group.add_argument("--gamma", type=float, help="full first block, round(gamma*I) afterwards")
    p.add_argument("--json", type=Path, dest="json_out", help="also write the report as JSON")
    p.add_argument("--csv", type=Path, dest="csv_out", help="also write the report as CSV")

    p = sub.add_parser("eval", help="evaluate a checkpoint on its eval split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--out", type=Path, help="write eval.json and flops files here")

    p = sub.add_parser("export-masks", help="gate-value histogram CSV from a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", type=Path, help="CSV path (stdout if omitted)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides: dict[str, object] = {}
    for text in args.set:
        key, value = parse_override(text)
        overrides[key] = value
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["model.seed"] = args.seed
        overrides["task.seed"] = args.seed
    return cfg.with_overrides(overrides).validate() if overrides else cfg.validate()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def run_training(cfg: RunConfig, out: Path) -> dict:
    """Train and write config echo, metrics, checkpoint, histogram and FLOPs report into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    data = generate_synthetic(cfg.task)
    try:
        model, metrics = train(cfg.model, cfg.task, cfg.train, data=data)
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(out / "checkpoint_last_good.json", Encoder(cfg.model), cfg.to_dict(), exc.checkpoint)
        raise
    (out / "metrics.csv").write_text(metrics.to_csv(cfg.model.layers))
    save_checkpoint(out / "checkpoint.json", model, cfg.to_dict())
    (out / "mask_histogram.csv").write_text(export_mask_histogram(model))
    ev = evaluate(model, data[1], gated=cfg.train.gated, group=cfg.train.attn_group)
    (out / "flops.json").write_text(ev.flops.to_json() + "\n")
    (out / "flops.csv").write_text(ev.flops.to_csv())
    final = metrics.final
    return {
        "gamma": cfg.model.gamma,
        "accuracy": ev.accuracy,
        "total_flops": ev.flops.total,
        "speedup": ev.flops.speedup,
        "kept_fraction": float(np.mean(ev.kept_fraction)) if ev.kept_fraction else 1.0,
        "polarization_fraction": final.polarization_fraction,
    }


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = args.out or Path("runs/train")
    summary = run_training(cfg, out)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _sweep_one(payload: tuple[dict, str]) -> dict:
    cfg_dict, out = payload
    cfg = RunConfig.from_dict(cfg_dict).validate()
    try:
        return {**run_training(cfg, Path(out)), "status": "ok"}
    except DivergenceError as exc:
        return {"gamma": cfg.model.gamma, "status": f"diverged: {exc}"}


SWEEP_COLUMNS = ["gamma", "accuracy", "total_flops", "speedup", "kept_fraction", "polarization_fraction", "status"]


def cmd_sweep(args) -> int:
    try:
        gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    except ValueError as exc:
        raise UsageError(f"--gammas: {exc}") from exc
    if not gammas:
        raise UsageError("--gammas: need at least one value")
    for g in gammas:
        if not 0.0 <= g <= 1.0:
            raise UsageError(f"--gammas: {g} outside [0, 1]")
    base = resolve_config(args)
    out = args.out or Path("runs/sweep")
    out.mkdir(parents=True, exist_ok=True)
    payloads = [(base.with_overrides({"model.gamma": g}).validate().to_dict(), str(out / f"gamma_{g:g}"))
                for g in gammas]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, payloads))
    else:
        rows = [_sweep_one(p) for p in payloads]

    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in SWEEP_COLUMNS})
    for row in rows:
        print(", ".join(f"{k}={row[k]}" for k in SWEEP_COLUMNS if k in row))
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


def cmd_flops(args) -> int:
    layers, seq_len, hidden = args.layers, args.seq_len, args.hidden
    if args.paper_dims:
        layers, seq_len, hidden = FULL_SCALE_DIMS["layers"], FULL_SCALE_DIMS["seq_len"], FULL_SCALE_DIMS["hidden"]
    if layers < 1 or seq_len < 1 or hidden < 1:
        raise UsageError("layers, seq-len and hidden must be positive")
    if args.counts:
        try:
            counts = [int(c) for c in args.counts.split(",")]
        except ValueError as exc:
            raise UsageError(f"--counts: {exc}") from exc
    elif args.gamma is not None:
        try:
            counts = gamma_schedule(args.gamma, seq_len, layers)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    else:
        counts = [seq_len] * layers
    try:
        report = model_flops(counts, seq_len, hidden, layers=layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(report.render())
    if args.json_out:
        args.json_out.write_text(report.to_json() + "\n")
    if args.csv_out:
        args.csv_out.write_text(report.to_csv())
    return EXIT_OK


def load_model(path: Path) -> tuple[RunConfig, Encoder]:
    doc = read_checkpoint(path)
    try:
        cfg = RunConfig.from_dict(doc["config"]).validate()
    except ConfigError as exc:
        raise CheckpointError(f"{path}: bad config echo: {exc}") from exc
    model = Encoder(cfg.model, dtype=np.dtype(doc.get("dtype", "float64")))
    return cfg, load_into(model, doc)


def cmd_eval(args) -> int:
    cfg, model = load_model(args.checkpoint)
    _, eval_set = generate_synthetic(cfg.task)
    ev = evaluate(model, eval_set, gated=cfg.train.gated, group=cfg.train.attn_group)
    result = {
        "accuracy": ev.accuracy,
        "mean_active_counts": ev.mean_active_counts,
        "kept_fraction": ev.kept_fraction,
        "total_flops": ev.flops.total,
        "total_label": ev.flops.total_label,
        "speedup": ev.flops.speedup_label,
    }
    print(json.dumps(result, indent=2, ensure_ascii=False))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(json.dumps(result, indent=2, ensure_ascii=False) + "\n")
        (args.out / "flops.json").write_text(ev.flops.to_json() + "\n")
        (args.out / "flops.csv").write_text(ev.flops.to_csv())
    return EXIT_OK


def cmd_export_masks(args) -> int:
    if args.bins < 2:
        raise UsageError("--bins must be at least 2")
    _, model = load_model(args.checkpoint)
    text = export_mask_histogram(model, args.bins)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "flops": cmd_flops,
    "eval": cmd_eval,
    "export-masks": cmd_export_masks,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
