import itertools
import json

import pytest

from tlm.attention import SCHEMES
from tlm.config import ExperimentConfig
from tlm.masking import ConfigError
from tlm.sweep import (
    PRESETS, SWEEP_COLUMNS, Cell, GridSpec, read_sweep_csv, run_cell, run_sweep, summarize,
)

TINY = ExperimentConfig(task="parity-pattern", vocab_size=8, min_len=3, max_len=4, train_size=8, eval_size=4,
                        d_emb=8, heads=2, max_epochs=1, batch_size=4)


def test_rate_grid_rows(tmp_path):
    grid = GridSpec.from_mapping({"seeds": [0, 1, 2], "scheme": "tlm", "rate": [0.05, 0.1, 0.15, 0.2]})
    assert len(grid.cells) == 4
    res = run_sweep(TINY, grid, tmp_path)
    rows = read_sweep_csv(tmp_path / "sweep.csv")
    assert len(rows) == 12 and not res.failed
    assert list(rows[0]) == list(SWEEP_COLUMNS)
    assert {(r["cell"], r["seed"]) for r in rows} == {(f"rate={r:g}", str(s))
                                                     for r in (0.05, 0.1, 0.15, 0.2) for s in range(3)}
    summary = open(tmp_path / "summary.csv").read().splitlines()
    assert len(summary) == 5


def test_preset_cell_counts():
    assert {k: len(f()) for k, f in PRESETS.items()} == {"table6": 9, "fig3": 12, "table3": 6, "table12": 15}
    schemes = {c.overrides["scheme"] for c in PRESETS["table6"]()[1:]}
    subsets = {"+".join(c) or "none" for k in range(4) for c in itertools.combinations(SCHEMES, k)}
    assert schemes == subsets
    vanilla = PRESETS["table6"]()[0]
    assert vanilla.overrides == {"scheme": "none", "hidden_dropout": 0.0}


def test_grid_errors():
    with pytest.raises(ConfigError):
        GridSpec.from_mapping({"nope": [1, 2]})
    with pytest.raises(ConfigError):
        GridSpec.from_mapping({"preset": "table99"})
    with pytest.raises(ConfigError):
        GridSpec.from_mapping({"seeds": []})
    with pytest.raises(ConfigError):
        GridSpec.from_mapping({"cell": [{"label": "a"}, {"label": "a"}]})


def test_grid_file_with_explicit_cells(tmp_path):
    p = tmp_path / "g.toml"
    p.write_text('seeds = 2\nlr = 1e-3\nrate = [0.1, 0.2]\n[[cell]]\nlabel = "big"\nd_emb = 16\n')
    grid = GridSpec.load(p)
    assert grid.seeds == [0, 1]
    assert [c.label for c in grid.cells] == ["rate=0.1", "rate=0.2", "big"]
    assert all(c.overrides["lr"] == 1e-3 for c in grid.cells)


def test_invalid_cell_fails_before_compute(tmp_path):
    grid = GridSpec.from_mapping({"scheme": "tlm", "rate": [0.1, 1.5]})
    with pytest.raises(ConfigError):
        run_sweep(TINY, grid, tmp_path)
    assert not (tmp_path / "cells").exists()


def test_resume_reuses_finished_cells(tmp_path):
    grid = GridSpec.from_mapping({"seeds": [0, 1], "scheme": "tlm", "rate": [0.1]})
    run_sweep(TINY, grid, tmp_path)
    first = (tmp_path / "sweep.csv").read_bytes()
    # tamper with a stored row: a resumed sweep must not recompute it
    cell = sorted((tmp_path / "cells").glob("*.json"))[0]
    row = json.loads(cell.read_text())
    row["message"] = "cached"
    cell.write_text(json.dumps(row))
    run_sweep(TINY, grid, tmp_path)
    assert "cached" in (tmp_path / "sweep.csv").read_text()
    row["message"] = ""
    cell.write_text(json.dumps(row))
    run_sweep(TINY, grid, tmp_path)
    assert (tmp_path / "sweep.csv").read_bytes() == first


def test_failed_cell_is_recorded_and_sweep_continues(tmp_path, monkeypatch):
    import tlm.sweep as sweep

    real = sweep.run_experiment

    def flaky(cfg, out):
        if cfg.rate == 0.2:
            raise RuntimeError("boom")
        return real(cfg, out)

    monkeypatch.setattr(sweep, "run_experiment", flaky)
    res = run_sweep(TINY, GridSpec.from_mapping({"scheme": "tlm", "rate": [0.1, 0.2, 0.15]}), tmp_path)
    assert len(res.rows) == 3
    assert [r["cell"] for r in res.failed] == ["rate=0.2"]
    assert "boom" in res.failed[0]["message"]
    assert res.rows[2]["status"] == "ok"


def test_summary_never_pools_configs():
    rows = [
        {"cell": "a", "config_hash": "h1", "seed": 0, "status": "ok", "eval_accuracy": 0.5, "gap": 0.1},
        {"cell": "a", "config_hash": "h1", "seed": 1, "status": "ok", "eval_accuracy": 0.7, "gap": 0.3},
        {"cell": "b", "config_hash": "h2", "seed": 0, "status": "ok", "eval_accuracy": 0.9, "gap": 0.0},
    ]
    s = summarize(rows)
    assert [(x["config_hash"], x["runs"]) for x in s] == [("h1", 2), ("h2", 1)]
    assert s[0]["eval_accuracy_mean"] == pytest.approx(0.6)


def test_sweep_csv_is_byte_identical(tmp_path):
    grid = GridSpec.from_mapping({"seeds": [0, 1], "scheme": ["tlm", "drophead"]})
    run_sweep(TINY, grid, tmp_path / "a")
    run_sweep(TINY, grid, tmp_path / "b")
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_run_cell_directly(tmp_path):
    row = run_cell(TINY, Cell("x", {"scheme": "att_dropout"}), 3, tmp_path)
    assert row["seed"] == 3 and row["status"] == "ok"
    assert len(list((tmp_path / "runs").iterdir())) == 1
