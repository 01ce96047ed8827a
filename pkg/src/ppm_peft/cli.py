"""Command-line entry point: ``ppm-peft <command> ...``.

Exit codes: 0 success, 1 internal error, 2 user or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .errors import ConfigError, DataError, TrainingError, UserError
from .eventlog import filter_short_cases, load_csv, unbiased_split, write_csv
from .experiment import (
    DEFAULT_BUDGET,
    PreparedData,
    RunConfig,
    _from_split,
    grid_search,
    load_data_dir,
    load_grammar,
    load_run_config,
    prepare_from_config,
    run,
)
from .model import load_checkpoint, save_checkpoint
from .peft import merge_lora
from .synthetic import generate_log
from .training import TrainReport, evaluate, export_curves, read_curves

log = logging.getLogger("ppm_peft")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def cmd_preprocess(args) -> int:
    raw = load_csv(args.log)
    raw_summary = raw.summary()
    filtered = filter_short_cases(raw)
    fsum = filtered.summary()
    print(f"raw: cases={raw_summary['cases']} events={raw_summary['events']} activities={raw_summary['activities']}")
    print(
        f"filtered (>=2 events): cases={fsum['cases']} events={fsum['events']} activities={fsum['activities']} "
        f"trace_length={fsum['trace_length_mean']:.4f}+-{fsum['trace_length_std']:.1f}"
    )
    if not filtered.cases:
        raise DataError("no cases with at least two events")
    split = unbiased_split(filtered, args.test_fraction)
    data = _from_split(split, args.val_fraction, None, raw_summary=raw_summary)
    data.save(args.out)
    print(
        f"split at {split.split_time.isoformat()}: train={len(split.train)} test={len(split.test)} "
        f"dropped={len(split.dropped)} vocab={len(data.vocab)}"
    )
    return 0


def _print_counts(counts: dict) -> None:
    print(f"trainable: {counts['trainable']}/{counts['total']} ({counts['trainable_pct']:.2f}%)")


def _fmt_metrics(m: dict | None) -> str:
    if not m:
        return "n/a"
    keys = ("na_acc", "na_acc_no_eos", "rt_mse")
    return " ".join(f"{k}={m[k]:.4f}" for k in keys if m.get(k) is not None)


def _run_and_save(cfg: RunConfig, command: str, backbone_path: str | None = None, merge: bool = False) -> int:
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    _write_json(out / "config.resolved.json", resolved)
    _write_json(out / "run.json", {"command": command, "seed": cfg.seed, "backbone": backbone_path})
    backbone = load_checkpoint(backbone_path) if backbone_path else None
    data = prepare_from_config(cfg)
    data.save(out / "data")
    res = run(cfg, data, backbone)
    _print_counts(res.counts)
    if merge and res.model.lora is not None:
        merge_lora(res.model)
    save_checkpoint(res.model, out / "model.ppmt")
    export_curves(res.report, out / "curves.csv")
    res.report.to_json(out / "report.json")
    _write_json(out / "metrics.json", {"val": res.val_metrics, "test": res.test_metrics, "params": res.counts})
    print(f"best epoch {res.report.best_epoch}/{cfg.train.epochs}; val {_fmt_metrics(res.val_metrics)}")
    print(f"test {_fmt_metrics(res.test_metrics)} (rt in {res.report.rt_units})")
    print(f"wrote {out}")
    return 0


def _scratch_config(path) -> RunConfig:
    cfg = load_run_config(path)
    if cfg.peft is not None:
        raise ConfigError("training from scratch takes no peft section; use the finetune command")
    return cfg


def cmd_pretrain(args) -> int:
    return _run_and_save(_scratch_config(args.config), "pretrain")


def cmd_train_baseline(args) -> int:
    return _run_and_save(_scratch_config(args.config), "train-baseline")


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.peft_raw is None:
        raise ConfigError("finetune config needs a peft section: {'freeze': {...}}, {'lora': {...}} or 'none'")
    return _run_and_save(cfg, "finetune", args.backbone, merge=args.merge_adapters)


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data: PreparedData = load_data_dir(args.data)
    if len(data.vocab) != model.input_cfg.vocab_size:
        raise DataError(
            f"data vocabulary has {len(data.vocab)} entries but the checkpoint expects {model.input_cfg.vocab_size}"
        )
    metrics = {split: evaluate(model, traces) if traces else None for split, traces in (("val", data.val), ("test", data.test))}
    for split, m in metrics.items():
        print(f"{split}: {_fmt_metrics(m)}")
    out = Path(args.out) if args.out else Path(str(args.checkpoint) + ".metrics.json")
    _write_json(out, metrics)
    print(f"wrote {out}")
    return 0


def cmd_grid(args) -> int:
    space = json.loads(Path(args.space).read_text())
    data = load_data_dir(args.data)
    budget = dict(DEFAULT_BUDGET)
    if args.scratch_epochs:
        budget["scratch"] = args.scratch_epochs
    if args.finetune_epochs:
        budget["finetune"] = args.finetune_epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "space.resolved.json", {"space": space, "budget": budget})
    ranked = grid_search(space, data, budget, out_dir=out, jobs=args.jobs)
    for i, r in enumerate(ranked, 1):
        loss = "failed" if r["status"] != "ok" else f"val_loss={r['val_loss']:.4f}"
        print(f"{i:3d} {r['config_id']} {loss} {json.dumps(r['overrides'], sort_keys=True)}")
    return 0


def cmd_gen_synthetic(args) -> int:
    grammar = load_grammar(args.grammar)
    log_ = generate_log(grammar, args.cases, args.seed, args.horizon_days * 86400.0)
    write_csv(log_, args.out)
    s = log_.summary()
    print(f"wrote {args.out}: cases={s['cases']} events={s['events']} activities={s['activities']}")
    return 0


def cmd_export_curves(args) -> int:
    src = Path(args.report)
    rows = TrainReport.from_json(src).rows if src.suffix == ".json" else read_curves(src)
    if args.splits:
        keep = set(args.splits.split(","))
        rows = [r for r in rows if r["split"] in keep]
    export_curves(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppm-peft", description="PEFT of sequence models for predictive process monitoring")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="filter, split and index an event-log CSV")
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.set_defaults(func=cmd_preprocess)

    for name, func, helptext in (
        ("pretrain", cmd_pretrain, "train a backbone from scratch for later transfer"),
        ("train-baseline", cmd_train_baseline, "train a from-scratch baseline"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("finetune", help="transplant a backbone, apply PEFT, train new I/O layers")
    s.add_argument("--config", required=True)
    s.add_argument("--backbone", required=True)
    s.add_argument("--merge-adapters", action="store_true", help="fold LoRA adapters into the weights before saving")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="score a checkpoint on a preprocessed data directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("grid", help="grid search over a configuration space")
    s.add_argument("--space", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--scratch-epochs", type=int)
    s.add_argument("--finetune-epochs", type=int)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("gen-synthetic", help="sample an event log from a process grammar")
    s.add_argument("--grammar", required=True, help="grammar JSON file or builtin:g1 / builtin:g2")
    s.add_argument("--cases", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--horizon-days", type=float, default=365.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("export-curves", help="write loss/metric curves as CSV")
    s.add_argument("--report", required=True, help="report.json or a curve CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--splits", help="comma-separated subset of train,val,test")
    s.set_defaults(func=cmd_export_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("PPM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except (UserError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
