"""Command-line behaviour: config validation, exit codes and reproducible outputs."""
import json

import pytest

from dplc import cli
from dplc.experiments import crossing

TINY_DOMAIN = {"rows": 16, "cols": 16, "n_warmup_days": 40, "n_train_days": 120, "n_test_days": 60, "seed": 2}

TINY_DENSITY = {
    "domain": TINY_DOMAIN,
    "densities": ["s8", "s4"],
    "dpl": {"batch_sites": 4, "window_start": "origin", "spinup": 30, "learning_rate": 0.01,
            "max_epochs": 2, "dropout": 0.0, "patience": None, "eval_every": 1, "hidden": [8, 8]},
    "sceua": {"n_complexes": 2, "max_evals": 300, "pcento": 0, "peps": 0},
}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(tmp_path, command, cfg, out="out", *extra):
    return cli.main([command, "--config", write(tmp_path, cfg), "--out", str(tmp_path / out), *extra])


def test_unknown_key_exit_2_names_field(tmp_path, capsys):
    cfg = dict(TINY_DENSITY, dpl=dict(TINY_DENSITY["dpl"], learnin_rate=1.0))
    assert run(tmp_path, "train-dpl", cfg) == 2
    err = capsys.readouterr().err
    assert "dpl" in err and "learnin_rate" in err


def test_wrong_type_exit_2(tmp_path, capsys):
    assert run(tmp_path, "generate-data", {"domain": dict(TINY_DOMAIN, rows="16")}) == 2
    assert "domain.rows" in capsys.readouterr().err


def test_bad_json_exit_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert cli.main(["generate-data", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_missing_data_exit_3(tmp_path, capsys):
    cfg = {"data_dir": str(tmp_path / "nowhere"), "density": "s8"}
    assert run(tmp_path, "train-dpl", cfg) == 3
    assert "data error" in capsys.readouterr().err


def test_bad_grid_exit_3(tmp_path):
    assert run(tmp_path, "generate-data", {"domain": dict(TINY_DOMAIN, rows=20)}) == 3


def test_generate_then_load(tmp_path):
    assert run(tmp_path, "generate-data", {"domain": TINY_DOMAIN}, "gen") == 0
    assert (tmp_path / "gen" / "domain").is_dir()
    cfg = dict(TINY_DENSITY, data_dir=str(tmp_path / "gen" / "domain"), density="s8")
    del cfg["domain"]
    assert run(tmp_path, "train-dpl", cfg, "dpl") == 0
    summary = json.loads((tmp_path / "dpl" / "summary.json").read_text())
    assert summary["command"] == "train-dpl" and summary["n_training"] == 4
    assert (tmp_path / "dpl" / "ledger.csv").exists()


def test_density_rerun_byte_identical(tmp_path):
    assert run(tmp_path, "run-density-experiment", TINY_DENSITY, "a") == 0
    assert run(tmp_path, "run-density-experiment", TINY_DENSITY, "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.suffix == ".csv")
    assert "density_report.csv" in names and "density_trace.csv" in names
    for n in names + ["summary.json", "config.resolved.json"]:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n


def test_seed_override_changes_output(tmp_path):
    assert run(tmp_path, "run-density-experiment", TINY_DENSITY, "a", "--seed", "0") == 0
    assert run(tmp_path, "run-density-experiment", TINY_DENSITY, "b", "--seed", "1") == 0
    a = (tmp_path / "a" / "density_trace.csv").read_bytes()
    assert a != (tmp_path / "b" / "density_trace.csv").read_bytes()


def test_seed_sweep_single_seed_zero_std(tmp_path):
    cfg = {"command": "run-density-experiment", "seeds": [4], "config": TINY_DENSITY}
    assert run(tmp_path, "seed-sweep", cfg) == 0
    out = tmp_path / "out"
    assert (out / "seed_4" / "density_report.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [4]
    assert all(v == 0.0 for v in summary["std"].values() if v is not None)


def test_seed_sweep_needs_seeds(tmp_path):
    assert run(tmp_path, "seed-sweep", {"command": "run-density-experiment"}) == 2


def test_crossing_interpolates():
    trace = [(1.0, 0.5), (2.0, 0.3), (3.0, 0.1)]
    assert crossing(trace, 0.2) == pytest.approx(2.5)
    assert crossing(trace, 0.5) == 1.0
    assert crossing(trace, 0.05) is None


def test_write_table_formats(tmp_path):
    from dplc.experiments import Table
    p = tmp_path / "t.csv"
    cli.write_table(p, Table(["a", "b", "c", "d"], [[0.1, None, float("nan"), True], [3, "x", 1e-20, False]]))
    assert p.read_text() == "a,b,c,d\n0.1,,,true\n3,x,1e-20,false\n"
