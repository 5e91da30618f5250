"""Grid sweeps over experiment configs.

A grid is a list of cells; each cell is a label plus a dict of config
overrides applied to a base config. Every (cell, seed) pair is one run whose
result row is written to its own JSON file, so an interrupted sweep resumes
where it stopped and cells may run in separate processes. The merged CSV is
ordered by cell then seed and carries no timing, so repeated sweeps produce
identical bytes.

Grid files are TOML::

    seeds = [0, 1, 2]
    preset = "fig3"            # optional: start from a named arm structure
    rate = [0.05, 0.1]         # list-valued config keys are crossed
    lr = 1e-3                  # scalars override the base config

    [[cell]]                   # explicit cells, appended after the product
    label = "big"
    d_emb = 64
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import SCHEMES
from .config import ExperimentConfig, _hashable, run_experiment
from .masking import ConfigError
from .training import config_hash, plain

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    "cell", "config_hash", "seed", "status", "epochs",
    "train_loss", "train_accuracy", "eval_loss", "eval_accuracy", "gap", "message",
)
SUMMARY_COLUMNS = ("cell", "config_hash", "runs", "failed",
                   "eval_accuracy_mean", "eval_accuracy_std", "gap_mean", "gap_std")


@dataclass(frozen=True)
class Cell:
    label: str
    overrides: dict = field(default_factory=dict)


def _combo_label(combo) -> str:
    names = {"att_dropout": "att-dropout", "drophead": "drophead", "tlm": "tlm"}
    return "+".join(["dropout"] + [names[s] for s in combo])


def table6_cells(rate: float = 0.1, dropout: float = 0.1) -> list[Cell]:
    """No regularization at all, then hidden dropout with every subset of the three schemes."""
    cells = [Cell("vanilla", {"scheme": "none", "hidden_dropout": 0.0})]
    for k in range(len(SCHEMES) + 1):
        for combo in itertools.combinations(SCHEMES, k):
            cells.append(Cell(_combo_label(combo), {
                "scheme": "+".join(combo) or "none", "rate": rate, "hidden_dropout": dropout,
            }))
    return cells


def fig3_cells(rates=(0.05, 0.1, 0.15, 0.2)) -> list[Cell]:
    return [Cell(f"{s}@{r:g}", {"scheme": s, "rate": r}) for s in SCHEMES for r in rates]


def table3_cells(pairs=((0.2, 0.2), (0.15, 0.15), (0.15, 0.1), (0.1, 0.15), (0.1, 0.1))) -> list[Cell]:
    """Vanilla encoder-decoder baseline plus encoder/decoder masking-rate pairs."""
    cells = [Cell("baseline", {"scheme": "none"})]
    for e, d in pairs:
        cells.append(Cell(f"E{e:g}-D{d:g}", {"scheme": "tlm", "encoder_rate": e, "decoder_rate": d}))
    return cells


def table12_cells(p_selfs=(0.0, 0.25, 0.5, 0.75, 1.0), rates=(0.05, 0.1, 0.15)) -> list[Cell]:
    return [Cell(f"p{p:g}@{r:g}", {"scheme": "tlm", "p_self": p, "rate": r})
            for r in rates for p in p_selfs]


PRESETS = {
    "table6": table6_cells,
    "fig3": fig3_cells,
    "table3": table3_cells,
    "table12": table12_cells,
}


@dataclass
class GridSpec:
    cells: list
    seeds: list

    @classmethod
    def from_mapping(cls, data: dict) -> "GridSpec":
        data = dict(data)
        seeds = data.pop("seeds", [0])
        if isinstance(seeds, int):
            seeds = list(range(seeds))
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds: expected a non-empty list of integers")
        explicit = data.pop("cell", [])
        preset = data.pop("preset", None)
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset]() if preset else []
        scalars = {k: v for k, v in data.items() if not isinstance(v, list)}
        axes = [(k, v) for k, v in data.items() if isinstance(v, list)]
        _check_keys(data)

        product = []
        for values in itertools.product(*(v for _, v in axes)):
            over = dict(zip((k for k, _ in axes), values))
            label = ",".join(f"{k}={_fmt(v)}" for k, v in over.items())
            product.append(Cell(label, over))
        if base and product and axes:
            cells = [Cell(f"{b.label}|{p.label}", {**b.overrides, **p.overrides}) for b in base for p in product]
        else:
            cells = base or (product if axes else [])
        for i, c in enumerate(explicit):
            c = dict(c)
            label = str(c.pop("label", f"cell{i}"))
            _check_keys(c)
            cells.append(Cell(label, c))
        if not cells:
            cells = [Cell("base", {})]
        cells = [Cell(c.label, {**scalars, **c.overrides}) for c in cells]
        labels = [c.label for c in cells]
        if len(set(labels)) != len(labels):
            raise ConfigError("cell: duplicate cell labels")
        return cls(cells, list(seeds))

    @classmethod
    def load(cls, path) -> "GridSpec":
        with open(path, "rb") as fh:
            try:
                return cls.from_mapping(tomllib.load(fh))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None

    @classmethod
    def preset(cls, name: str, seeds=(0,)) -> "GridSpec":
        return cls.from_mapping({"preset": name, "seeds": list(seeds)})


def _check_keys(d: dict) -> None:
    known = set(ExperimentConfig.__dataclass_fields__)
    for key in d:
        if key not in known:
            raise ConfigError(f"{key}: unknown config key in grid")


def _fmt(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def cell_config(base: ExperimentConfig, cell: Cell, seed: int) -> ExperimentConfig:
    return base.replace(**cell.overrides, seed=seed, run_id=f"{cell.label}/s{seed}")


def _result_name(cfg: ExperimentConfig) -> str:
    return f"{config_hash(_hashable(cfg))}-s{cfg.seed}"


def run_cell(base: ExperimentConfig, cell: Cell, seed: int, out_dir) -> dict:
    """Run one (cell, seed) pair and write its row; an existing row file is reused."""
    out_dir = Path(out_dir)
    cfg = cell_config(base, cell, seed)
    h = config_hash(_hashable(cfg))
    name = _result_name(cfg)
    result = out_dir / "cells" / f"{name}.json"
    if result.exists():
        row = json.loads(result.read_text())
        if row.get("cell") == cell.label:
            return row
    row = {"cell": cell.label, "config_hash": h, "seed": seed}
    try:
        rec = run_experiment(cfg, out_dir / "runs" / name)
        f = rec.final
        row.update(status=rec.status, message=rec.message, epochs=f.epoch if f else 0,
                   train_loss=f.train_loss if f else math.nan, train_accuracy=f.train_accuracy if f else math.nan,
                   eval_loss=f.eval_loss if f else math.nan, eval_accuracy=f.eval_accuracy if f else math.nan,
                   gap=rec.gap)
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        log.warning("cell %s seed %d failed: %s", cell.label, seed, exc)
        row.update(status="error", message=f"{type(exc).__name__}: {exc}", epochs=0,
                   train_loss=math.nan, train_accuracy=math.nan, eval_loss=math.nan,
                   eval_accuracy=math.nan, gap=math.nan)
    result.parent.mkdir(parents=True, exist_ok=True)
    tmp = result.with_suffix(".tmp")
    tmp.write_text(json.dumps(plain(row), sort_keys=True, allow_nan=True) + "\n")
    tmp.replace(result)
    return row


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class SweepResult:
    rows: list
    out_dir: Path

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r["status"] != "ok"]


def run_sweep(base: ExperimentConfig, grid: GridSpec, out_dir, workers: int = 1) -> SweepResult:
    """Run every (cell, seed) of ``grid`` and write ``sweep.csv`` and ``summary.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # validate every cell before any compute
    jobs = []
    for cell in grid.cells:
        for seed in grid.seeds:
            cell_config(base, cell, seed)
            jobs.append((base, cell, seed, out_dir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_args, jobs))
    else:
        rows = [run_cell(*job) for job in jobs]
    write_sweep_csv(rows, out_dir / "sweep.csv")
    write_summary_csv(rows, out_dir / "summary.csv")
    return SweepResult(rows, out_dir)


def _cell_value(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_cell_value(r[c]) for c in SWEEP_COLUMNS])


def summarize(rows) -> list[dict]:
    """Per-config aggregates; rows with different config hashes are never pooled."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r["config_hash"], []).append(r)
    out = []
    for h, rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        acc = np.array([r["eval_accuracy"] for r in ok], dtype=float)
        gap = np.array([r["gap"] for r in ok], dtype=float)
        out.append({
            "cell": rs[0]["cell"], "config_hash": h, "runs": len(rs), "failed": len(rs) - len(ok),
            "eval_accuracy_mean": float(acc.mean()) if ok else math.nan,
            "eval_accuracy_std": float(acc.std()) if ok else math.nan,
            "gap_mean": float(gap.mean()) if ok else math.nan,
            "gap_std": float(gap.std()) if ok else math.nan,
        })
    return out


def write_summary_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summarize(rows):
            w.writerow([_cell_value(s[c]) for c in SUMMARY_COLUMNS])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
