"""Command-line entry point: ``dplc <command> --config FILE --out DIR [--seed N] [--jobs K]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Every command is a pure function of (config, input directory, seed); CSV
reports and ``summary.json`` are byte-identical across re-runs, wall times
go to ``timing.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import experiments as ex
from .autodiff import NonFiniteError
from .dataland import DataError, make_folds, neighbor_pairs, sample_patches, save_domain, write_basin_csv
from .dpl_train import DplDataset, DplError, EmptyMaskError, evaluate_dpl, train_dpl, write_run_dir
from .hbv import HbvError
from .nets import NetError
from .params import calibrated
from .sceua import SceError, SiteResult, write_site_csv
from .surrogate import Surrogate, SurrogateError
from .vic_lite import VicError

log = logging.getLogger("dplc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("generate-data", "train-surrogate", "train-dpl", "calibrate", "run-density-experiment",
            "run-spatial-experiment", "run-uncalibrated-experiment", "run-scaling-experiment", "seed-sweep")


class NumericFailure(RuntimeError):
    pass


def load_schema() -> dict:
    return json.loads(resources.files("dplc").joinpath("schemas/config.schema.json").read_text())


def validate_config(cfg) -> None:
    """Raise :class:`ConfigError` naming the offending field path."""
    v = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(v.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ex.ConfigError(f"config error at {path}: {e.message}")


def read_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as e:
        raise ex.ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ex.ConfigError(f"config {path} is not valid JSON: {e}") from e
    validate_config(cfg)
    return cfg


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    return v


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ""
    return str(v)


def write_table(path, table: ex.Table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header)
        for row in table.rows:
            w.writerow([_cell(v) for v in row])


def write_report(out: Path, report: ex.Report, extra_summary: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, table in report.tables.items():
        write_table(out / name, table)
    dump_json(out / "summary.json", dict(report.summary, **(extra_summary or {})))
    dump_json(out / "timing.json", report.timing)


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(cfg: dict, out: Path, jobs: int) -> dict:
    written = {}
    if cfg.get("basins") is not None:
        bs = ex.get_basins(cfg)
        d = out / "basins"
        write_basin_csv(bs, d)
        folds = make_folds(len(bs), int(cfg.get("folds", 10)), int(cfg.get("seed", 0)))
        write_table(d / "folds.csv", ex.Table(["basin_id", "fold"], [[b.id, int(f)] for b, f in zip(bs.basins, folds)]))
        written["basins"] = {"n": len(bs), "dir": "basins"}
    if cfg.get("domain") is not None or not written:
        dom = ex.get_domain(cfg)
        save_domain(dom, out / "domain", write_cells=bool(cfg.get("write_cells", True)))
        written["domain"] = {"n_cells": dom.n_cells, "noise_sigma": dom.noise_sigma, "dir": "domain"}
    return written


def _surrogate_for(cfg: dict):
    if cfg.get("surrogate_checkpoint"):
        return Surrogate.load(cfg["surrogate_checkpoint"])
    return ex._cached_surrogate(cfg)[0]


def cmd_train_surrogate(cfg: dict, out: Path, jobs: int) -> dict:
    dom = ex.get_domain(cfg)
    model, rep = ex.build_and_train_surrogate(dom, cfg.get("surrogate"))
    if rep.aborted:
        log.warning("surrogate training diverged; kept last finite weights")
    model.save(out / "surrogate.ckpt.json", {"domain": dom.config.to_dict()})
    rows = [[v, d["median_corr"], d["median_ubrmse"], d["n_sequences"], d["n_undefined"]]
            for v, d in rep.variables.items()]
    write_table(out / "fidelity.csv", ex.Table(["variable", "median_corr", "median_ubrmse", "n_sequences",
                                                "n_undefined"], rows))
    write_table(out / "history.csv", ex.Table(["epoch", "train_loss"], [[i, v] for i, v in enumerate(rep.history)]))
    dump_json(out / "timing.json", {"seconds": rep.seconds})
    return {"fidelity": rep.variables, "zero_variance_targets": rep.zero_variance_targets,
            "initial_loss": rep.initial_loss, "final_loss": rep.final_loss, "aborted": rep.aborted,
            "held_out_cells": len(rep.held_out_cells), "notes": rep.notes}


def cmd_train_dpl(cfg: dict, out: Path, jobs: int) -> dict:
    dom = ex.get_domain(cfg)
    seed = int(cfg.get("seed", 0))
    cells = sample_patches(dom, cfg.get("density", "s8"), seed)
    pairs = neighbor_pairs(dom, cells)
    dpl = {k: v for k, v in (cfg.get("dpl") or {}).items()
           if k not in ("max_epochs_by_density", "eval_every_epochs", "train_steps", "n_evals")}
    tc = ex.train_config(dpl, seed=seed)
    sur = _surrogate_for(cfg) if tc.pbm == "surrogate" else None
    ds = DplDataset.from_domain(dom, cells, extra_cells=[nb for _, nb in pairs], surrogate=sur)
    res = train_dpl(ds, tc)
    _check_status(res)
    pos = {c: i for i, c in enumerate(ds.site_ids)}
    pairs_pos = [(pos[dom.cell_id(a)], pos[dom.cell_id(b)]) for a, b in pairs]
    metrics = {"temporal": evaluate_dpl(res.model, ds, "temporal"),
               "spatial_neighbor": evaluate_dpl(res.model, ds, "spatial_neighbor", pairs_pos)}
    write_run_dir(out, tc, res, metrics)
    dump_json(out / "timing.json", {"seconds": res.seconds})
    return {"status": res.status, "best_test_rmse": res.best_test_rmse, "steps": res.steps,
            "epochs": res.ledger.epochs, "notes": res.notes, "n_training": len(cells),
            "epochs_to_threshold": res.ledger.epochs_to_threshold(tc.rmse_threshold)}


def cmd_calibrate(cfg: dict, out: Path, jobs: int) -> dict:
    dom = ex.get_domain(cfg)
    seed = int(cfg.get("seed", 0))
    cells = sample_patches(dom, cfg.get("density", "s8"), seed)
    sur = _surrogate_for(cfg) if dom.config.model_kind == "vic_lite" else None
    res = ex._calibrate_cells(dom, cells, ex.sce_config(cfg.get("sceua"), seed=seed), surrogate=sur)
    names = [s.name for s in calibrated(dom.specs)]
    write_site_csv(out / "sceua_sites.csv", {dom.cell_id(c): SiteResult(dom.cell_id(c), r) for c, r in res.items()},
                   [f"{n}_raw" for n in names])
    trace = [[dom.cell_id(c), i + 1, n, b] for c, r in res.items()
             for i, (n, b) in enumerate(zip(r.ledger.evaluations, r.ledger.best))]
    write_table(out / "sceua_trace.csv", ex.Table(["site_id", "iteration", "evaluations", "best_rmse"], trace))
    best = [r.best_f for r in res.values()]
    return {"n_sites": len(res), "median_best_rmse": float(np.median(best)),
            "mean_evaluations": float(np.mean([r.n_evals for r in res.values()]))}


def _check_status(res):
    if res.status == "aborted_nan":
        raise NumericFailure("; ".join(res.notes) or "training aborted on non-finite loss")


def run_command(command: str, cfg: dict, out: Path, jobs: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "config.resolved.json", cfg)
    if command in ex.EXPERIMENTS:
        report = ex.EXPERIMENTS[command](cfg, jobs)
        write_report(out, report)
    elif command == "seed-sweep":
        if "command" not in cfg or "seeds" not in cfg:
            raise ex.ConfigError("config error at <root>: seed-sweep needs 'command' and 'seeds'")
        report, subs = ex.run_seed_sweep(cfg, jobs)
        for s, sub in subs.items():
            write_report(out / f"seed_{s}", sub)
        write_report(out, report)
    else:
        fn = {"generate-data": cmd_generate_data, "train-surrogate": cmd_train_surrogate,
              "train-dpl": cmd_train_dpl, "calibrate": cmd_calibrate}[command]
        summary = fn(cfg, out, jobs)
        dump_json(out / "summary.json", dict(summary, command=command))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dplc", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config (see schemas/config.schema.json)")
    p.add_argument("--out", required=True, help="output directory (overwritten)")
    p.add_argument("--seed", type=int, default=None, help="override the config's top-level seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.jobs < 1:
            raise ex.ConfigError("config error at --jobs: must be >= 1")
        return run_command(args.command, cfg, Path(args.out), args.jobs)
    except (ex.ConfigError, SceError, DplError) as e:
        if isinstance(e, EmptyMaskError):
            print(f"dplc: data error: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"dplc: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"dplc: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NonFiniteError, FloatingPointError, HbvError, VicError, NetError, SurrogateError) as e:
        print(f"dplc: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
