"""Command-line entry point.

    tlm train CONFIG [--rate 0.2 ...]
    tlm sweep CONFIG GRID | --preset table6 [--seeds 0 1 2] [--workers 4]
    tlm verify [--only NAME ...] [--inject-fault flip-allow]
    tlm gen-data CONFIG --out DIR
    tlm export-dataset CONFIG --split eval --out FILE

Every ``ExperimentConfig`` field is also a flag (``--hidden-dropout 0``) that
overrides the config file. Exit codes: 0 ok, 2 config error, 3 divergence,
4 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import ExperimentConfig, run_experiment
from .masking import ConfigError
from .tasks import DatasetError, export_tsv, make_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4

log = logging.getLogger("tlm")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


_PARSERS = {"int": int, "float": float, "bool": _bool, "str": str}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("config overrides")
    for f in fields(ExperimentConfig):
        type_name = f.type if isinstance(f.type, str) else f.type.__name__
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                           type=_PARSERS[type_name], default=None, metavar=type_name.upper())


def load_config(args) -> ExperimentConfig:
    """Config file (if any) with command-line overrides applied, validated."""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config: no such file {path}")
        cfg = ExperimentConfig.load(path)
    else:
        cfg = ExperimentConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.replace(**overrides) if overrides else cfg


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.output_dir)
    rec = run_experiment(cfg, out)
    f = rec.final
    summary = {
        "run_id": rec.run_id, "config_hash": rec.config_hash, "seed": rec.seed, "status": rec.status,
        "epochs": f.epoch if f else 0,
        "train_accuracy": f.train_accuracy if f else None,
        "eval_accuracy": f.eval_accuracy if f else None,
        "gap": rec.gap, "output_dir": str(out),
    }
    print(json.dumps(summary))
    if rec.status == "diverged":
        print(f"error: run diverged: {rec.message}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .sweep import GridSpec, run_sweep

    base = load_config(args)
    if args.grid:
        grid = GridSpec.load(args.grid)
        if args.preset:
            raise ConfigError("preset: give either a grid file or --preset, not both")
    elif args.preset:
        grid = GridSpec.preset(args.preset)
    else:
        raise ConfigError("grid: a grid file or --preset is required")
    if args.seeds:
        grid.seeds = list(args.seeds)
    out = Path(args.out or base.output_dir)
    res = run_sweep(base, grid, out, workers=args.workers)
    print(f"{len(res.rows)} rows ({len(grid.cells)} cells x {len(grid.seeds)} seeds), "
          f"{len(res.failed)} failed -> {out / 'sweep.csv'}")
    for r in res.failed:
        print(f"  failed: {r['cell']} seed {r['seed']}: {r['message']}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .checks import CHECKS, run_checks

    names = args.only or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"only: unknown check {unknown[0]!r}")

    def show(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} {r.seconds:7.2f}s  {r.detail}", flush=True)

    results = run_checks(names, fault=args.inject_fault, on_result=show)
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)} ({total:.1f}s)")
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed ({total:.1f}s)")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    ds = make_dataset(cfg.dataset_spec())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "eval"):
        export_tsv(ds, out / f"{split}.tsv", split)
    print(f"{len(ds.train)} train / {len(ds.eval)} eval examples, vocab {ds.vocab_size} -> {out}")
    return EXIT_OK


def cmd_export_dataset(args) -> int:
    cfg = load_config(args)
    ds = make_dataset(cfg.dataset_spec())
    path = export_tsv(ds, args.out, args.split)
    print(f"wrote {args.split} split ({len(ds.train if args.split == 'train' else ds.eval)} rows) -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tlm", description="Token-level masking experiments")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one config; writes runrecord.json, metrics.csv, checkpoint.bin")
    p.add_argument("config", nargs="?", help="flat TOML config file")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a grid of configs x seeds")
    p.add_argument("config", nargs="?", help="base config file")
    p.add_argument("grid", nargs="?", help="grid TOML file")
    p.add_argument("--preset", choices=("table6", "fig3", "table3", "table12"))
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="sweep directory (default: the config's output_dir)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--only", nargs="+", metavar="NAME")
    p.add_argument("--inject-fault", choices=("flip-allow",))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="generate a dataset and write train.tsv / eval.tsv")
    p.add_argument("config", nargs="?")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("export-dataset", help="write one split of a dataset as TSV")
    p.add_argument("config", nargs="?")
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_export_dataset)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
