"""The headline experiments as pure functions of a validated config dict.

Each ``run_*`` function returns a :class:`Report`: named CSV tables, a
deterministic ``summary`` and a separate ``timing`` record (wall time is the
only non-reproducible output, so it is kept out of the CSVs).  Workers
rebuild domains from their config instead of receiving large arrays.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import hbv, vic_lite
from .dataland import (BasinSet, DataError, DomainConfig, build_domain, fold_rotations, generate_basins,
                       load_basin_csv, load_domain, make_folds, nearest_cell, neighbor_pairs, sample_patches,
                       subsample_training)
from .dpl_train import (DplDataset, TrainConfig, evaluate_dpl, infer_raw, simulate_numpy, train_dpl)
from .metrics import corr, median_metric, metric_table, nse
from .params import calibrated, descale, full_matrix
from .sceua import SceConfig, calibrate_sites, iteration_trace
from .surrogate import Surrogate, SurrogateConfig, build_surrogate_dataset, train_surrogate

log = logging.getLogger(__name__)

DENSITIES = ("s16", "s8", "s4")


class ConfigError(ValueError):
    pass


@dataclass
class Table:
    header: list[str]
    rows: list[list]


@dataclass
class Report:
    tables: dict[str, Table] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# helpers


def crossing(trace: Sequence[tuple[float, float]], threshold: float) -> float | None:
    """First epoch at which a ``(epoch, rmse)`` trace reaches ``threshold``.

    Linear interpolation between the two recorded points that bracket the
    crossing; ``None`` if the trace never gets there.
    """
    prev = None
    for ep, r in trace:
        if r <= threshold:
            if prev is None or prev[1] <= threshold:
                return float(ep)
            e0, r0 = prev
            return float(e0 + (r0 - threshold) / (r0 - r) * (ep - e0))
        prev = (ep, r)
    return None


def _dataclass_from(cls, d: dict | None, where: str, **overrides):
    d = dict(d or {})
    d.update(overrides)
    known = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"config error at {where}: unknown keys {extra}")
    if "hidden" in d and d["hidden"] is not None:
        d["hidden"] = tuple(d["hidden"])
    try:
        return cls(**d)
    except Exception as e:
        raise ConfigError(f"config error at {where}: {e}") from e


def train_config(d: dict | None, where: str = "dpl", **overrides) -> TrainConfig:
    return _dataclass_from(TrainConfig, d, where, **overrides)


def sce_config(d: dict | None, where: str = "sceua", **overrides) -> SceConfig:
    return _dataclass_from(SceConfig, d, where, **overrides)


_DOMAIN_CACHE: dict[str, object] = {}


def get_domain(cfg: dict):
    """Domain from ``cfg['data_dir']`` or ``cfg['domain']``, cached per process."""
    if cfg.get("data_dir"):
        key = "dir:" + str(cfg["data_dir"])
        make = lambda: load_domain(cfg["data_dir"])
    else:
        dcfg = cfg.get("domain") or {}
        key = json.dumps(dcfg, sort_keys=True)
        make = lambda: build_domain(DomainConfig.from_dict(dcfg))
    if key not in _DOMAIN_CACHE:
        if len(_DOMAIN_CACHE) >= 2:
            _DOMAIN_CACHE.pop(next(iter(_DOMAIN_CACHE)))
        _DOMAIN_CACHE[key] = make()
    return _DOMAIN_CACHE[key]


def get_basins(cfg: dict) -> BasinSet:
    if cfg.get("data_dir"):
        return load_basin_csv(cfg["data_dir"], impute=bool(cfg.get("impute", False)))
    b = dict(cfg.get("basins") or {})
    return generate_basins(**b)


def pmap(fn, args_list: Sequence[tuple], jobs: int = 1) -> list:
    """Ordered map over argument tuples, on a process pool when ``jobs > 1``."""
    if jobs <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futs = [ex.submit(fn, *a) for a in args_list]
        return [f.result() for f in futs]


def _train(ds: DplDataset, tc: TrainConfig):
    res = train_dpl(ds, tc)
    if res.status == "aborted_nan":
        raise FloatingPointError("dPL training aborted: " + "; ".join(res.notes))
    return res


def _median(rows, name):
    return median_metric(rows, name)[0]


def _threshold(cfg: dict, sigma: float) -> float:
    t = cfg.get("threshold") or {}
    if t.get("absolute") is not None:
        return float(t["absolute"])
    return float(t.get("noise_factor", 3.0)) * sigma


def _pooled_rmse(sim: np.ndarray, obs: np.ndarray) -> float:
    d = sim - obs
    ok = np.isfinite(d)
    return float(np.sqrt(np.mean(d[ok] ** 2)))


def _hbv_simulator(dom, cells: np.ndarray, stop: int, keep: slice):
    """SCE-UA simulator over raw (0, 1) parameters for HBV domain cells."""
    specs = dom.specs
    cal = calibrated(specs)

    def sim(sites, pts):
        full = full_matrix(descale(np.asarray(pts), cal), specs)
        return hbv.hbv_run(dom.forcing[:stop][:, cells[sites]], full)[keep]

    return sim


def _surrogate_simulator(dom, sur: Surrogate, cells: np.ndarray, stop: int, keep: slice):
    def sim(sites, pts):
        sm, _ = sur.predict_numpy(dom.forcing[:stop][:, cells[sites]], np.asarray(pts),
                                  dom.attributes[cells[sites]] if sur.uses_attributes else None)
        return sm[keep]

    return sim


def _calibrate_cells(dom, cells: Sequence[int], sce: SceConfig, surrogate: Surrogate | None = None):
    cells = np.asarray(sorted(cells))
    tr = dom.train_slice
    if surrogate is None:
        sim = _hbv_simulator(dom, cells, tr.stop, tr)
    else:
        sim = _surrogate_simulator(dom, surrogate, cells, tr.stop, tr)
    n = len(calibrated(dom.specs))
    res = calibrate_sites([dom.cell_id(c) for c in cells], sim, dom.obs[tr][:, cells],
                          np.array([[0.0, 1.0]] * n), sce)
    failed = [k for k, v in res.items() if v.result is None]
    if failed:
        raise FloatingPointError(f"SCE-UA failed on sites {failed}: {res[failed[0]].error}")
    return {int(c): res[dom.cell_id(c)].result for c in cells}


def _simulate_raw(dom, raw: np.ndarray, cells: Sequence[int]) -> np.ndarray:
    full = full_matrix(descale(raw, calibrated(dom.specs)), dom.specs)
    f = dom.forcing[:, list(cells)]
    if dom.config.model_kind == "hbv":
        return hbv.hbv_run(f, full)
    return vic_lite.vic_lite_simulate(f, full)["sm"]


# ---------------------------------------------------------------------------
# density experiment


def _dpl_density_task(cfg: dict, density: str):
    dom = get_domain(cfg)
    seed = int(cfg.get("seed", 0))
    cells = sample_patches(dom, density, seed)
    dpl = dict(cfg.get("dpl") or {})
    by_density = dpl.pop("max_epochs_by_density", None) or {}
    eval_epochs = dpl.pop("eval_every_epochs", None)
    over = {"seed": seed}
    if density in by_density:
        over["max_epochs"] = float(by_density[density])
    tc = train_config(dpl, **over)
    if eval_epochs is not None:
        steps_per_epoch = len(cells) / tc.batch_sites
        tc = dataclasses.replace(tc, eval_every=max(1, int(round(eval_epochs * steps_per_epoch))))
    ds = DplDataset.from_domain(dom, cells)
    t0 = time.perf_counter()
    res = _train(ds, tc)
    trace = [(ep, r) for ep, _, r in res.ledger.rows]
    return {"density": density, "n_cells": len(cells), "trace": trace, "status": res.status,
            "final_epoch": res.ledger.epochs, "seconds": time.perf_counter() - t0}


def _sce_density_task(cfg: dict, densities: Sequence[str]):
    dom = get_domain(cfg)
    seed = int(cfg.get("seed", 0))
    sets = {d: sample_patches(dom, d, seed) for d in densities}
    union = sorted(set().union(*sets.values()))
    sce = sce_config(cfg.get("sceua"), seed=seed)
    t0 = time.perf_counter()
    res = _calibrate_cells(dom, union, sce)
    fit_seconds = time.perf_counter() - t0
    cal, te = calibrated(dom.specs), dom.test_slice
    out = {}
    for d, cells in sets.items():
        def score(x, cells=cells):
            q = hbv.hbv_run(dom.forcing[:, cells], full_matrix(descale(x, cal), dom.specs))
            return _pooled_rmse(q[te], dom.obs[te][:, cells])
        trace = iteration_trace([res[c] for c in cells], score)
        out[d] = {"density": d, "n_cells": len(cells), "trace": trace, "status": "max_evals",
                  "final_epoch": float(np.mean([res[c].n_evals for c in cells]))}
    return out, fit_seconds


def run_density_experiment(cfg: dict, jobs: int = 1) -> Report:
    dom = get_domain(cfg)
    densities = list(cfg.get("densities") or DENSITIES)
    thr = _threshold(cfg, dom.noise_sigma)
    t0 = time.perf_counter()
    tasks = [(_dpl_density_task, (cfg, d)) for d in densities] + [(_sce_density_task, (cfg, densities))]
    results = pmap(_call, tasks, jobs)
    dpl_runs = results[:len(densities)]
    sce_runs, sce_seconds = results[-1]

    report_rows, trace_rows = [], []
    etts = {"dpl": {}, "sceua": {}}
    for method, runs in (("dpl", dpl_runs), ("sceua", [sce_runs[d] for d in densities])):
        for run in runs:
            tr = run["trace"]
            ett = crossing(tr, thr)
            etts[method][run["density"]] = ett
            report_rows.append([method, run["density"], run["n_cells"], thr, ett, run["final_epoch"],
                                tr[-1][1] if tr else None, min(r for _, r in tr) if tr else None])
            trace_rows += [[method, run["density"], ep, r] for ep, r in tr]

    d_ett = [etts["dpl"].get(d) for d in ("s16", "s8", "s4")]
    s_ett = [etts["sceua"].get(d) for d in ("s16", "s8", "s4")]
    checks = {}
    if None not in d_ett:
        checks["dpl_strictly_decreasing"] = bool(d_ett[0] > d_ett[1] > d_ett[2])
    if None not in s_ett:
        checks["sceua_relative_spread"] = float((max(s_ett) - min(s_ett)) / np.mean(s_ett))
    if d_ett[2] is not None and s_ett[2] is not None:
        checks["sceua_over_dpl_at_s4"] = float(s_ett[2] / d_ett[2])
    metrics = {f"{m}_ett_{d}": v for m in etts for d, v in etts[m].items()}
    summary = {"experiment": "density", "noise_sigma": dom.noise_sigma, "threshold": thr,
               "threshold_config": cfg.get("threshold") or {"noise_factor": 3.0},
               "epochs_to_threshold": etts, "checks": checks, "metrics": metrics}
    timing = {"total_seconds": time.perf_counter() - t0, "sceua_seconds": sce_seconds,
              "dpl_seconds": {r["density"]: r["seconds"] for r in dpl_runs}}
    return Report({
        "density_report.csv": Table(["method", "density", "n_cells", "threshold", "epochs_to_threshold",
                                     "final_epoch", "ending_rmse", "best_rmse"], report_rows),
        "density_trace.csv": Table(["method", "density", "epoch", "test_rmse"], trace_rows),
    }, summary, timing)


def _call(fn, args):
    return fn(*args)


# ---------------------------------------------------------------------------
# spatial generalization


def _summary_row(method, which, rows, base_nse=None):
    med_nse = _median(rows, "nse")
    drop = None if base_nse is None or med_nse is None else base_nse - med_nse
    return [method, which, len(rows), med_nse, _median(rows, "kge"), _median(rows, "corr"),
            _median(rows, "ubrmse"), _median(rows, "bias"), drop]


def _spatial_dpl_task(cfg: dict, network: str):
    dom = get_domain(cfg)
    seed = int(cfg.get("seed", 0))
    cells = sample_patches(dom, cfg.get("density", "s8"), seed)
    pairs = neighbor_pairs(dom, cells)
    ds = DplDataset.from_domain(dom, cells, extra_cells=[nb for _, nb in pairs])
    pos = {c: i for i, c in enumerate(list(cells) + [nb for _, nb in pairs if nb not in set(cells)])}
    net_over = dict((cfg.get("networks") or {}).get(network) or {})
    tc = train_config({**(cfg.get("dpl") or {}), **net_over}, where=f"networks.{network}",
                      network=network, seed=seed)
    t0 = time.perf_counter()
    res = _train(ds, tc)
    train_rows = evaluate_dpl(res.model, ds, "temporal")
    nb_rows = evaluate_dpl(res.model, ds, "spatial_neighbor", [(pos[a], pos[b]) for a, b in pairs])
    return network, train_rows, nb_rows, time.perf_counter() - t0


def _spatial_sce_task(cfg: dict):
    dom = get_domain(cfg)
    seed = int(cfg.get("seed", 0))
    cells = sample_patches(dom, cfg.get("density", "s8"), seed)
    pairs = neighbor_pairs(dom, cells)
    t0 = time.perf_counter()
    res = _calibrate_cells(dom, cells, sce_config(cfg.get("sceua"), seed=seed))
    te = dom.test_slice
    raw = np.stack([res[c].best_x for c in cells])
    q = _simulate_raw(dom, raw, cells)
    train_rows = metric_table(q[te], dom.obs[te][:, cells], [dom.cell_id(c) for c in cells])
    nbs = [nb for _, nb in pairs]
    donors = [nearest_cell(dom, nb, cells) for nb in nbs]
    raw_nb = np.stack([res[d].best_x for d in donors])
    qn = _simulate_raw(dom, raw_nb, nbs)
    nb_rows = metric_table(qn[te], dom.obs[te][:, nbs], [dom.cell_id(c) for c in nbs])
    return "sceua", train_rows, nb_rows, time.perf_counter() - t0


def run_spatial_experiment(cfg: dict, jobs: int = 1) -> Report:
    t0 = time.perf_counter()
    dom = get_domain(cfg)
    seed = int(cfg.get("seed", 0))
    cells = sample_patches(dom, cfg.get("density", "s8"), seed)
    pairs = neighbor_pairs(dom, cells)
    if any(nb in set(cells) for _, nb in pairs):
        raise DataError("a neighbour cell is in the training set")
    networks = list((cfg.get("networks") or {"gA": {}, "gZ": {}}).keys())
    tasks = [(_spatial_dpl_task, (cfg, n)) for n in networks] + [(_spatial_sce_task, (cfg,))]
    results = pmap(_call, tasks, jobs)
    report, tables, summary, timing = [], {}, {}, {}
    for method, train_rows, nb_rows, secs in results:
        base = _median(train_rows, "nse")
        report.append(_summary_row(method, "train", train_rows))
        report.append(_summary_row(method, "neighbor", nb_rows, base))
        for which, rows in (("train", train_rows), ("neighbor", nb_rows)):
            tables[f"metrics_{method}_{which}.csv"] = _metric_rows_table(rows)
        summary[method] = {"median_nse_train": base, "median_nse_neighbor": _median(nb_rows, "nse"),
                           "nse_drop": report[-1][-1], "median_ubrmse_train": _median(train_rows, "ubrmse"),
                           "median_ubrmse_neighbor": _median(nb_rows, "ubrmse")}
        timing[method] = secs
    metrics = {f"{m}_{k}": v for m, d in summary.items() for k, v in d.items()}
    out = {"spatial_report.csv": Table(["method", "set", "n_sites", "median_nse", "median_kge", "median_corr",
                                        "median_ubrmse", "median_bias", "nse_drop"], report)}
    out.update(tables)
    timing["total_seconds"] = time.perf_counter() - t0
    return Report(out, {"experiment": "spatial", "density": cfg.get("density", "s8"), "n_training": len(cells),
                        "n_neighbors": len(pairs), "methods": summary, "metrics": metrics}, timing)


def _metric_rows_table(rows: list[dict]) -> Table:
    from .metrics import TABLE_COLUMNS
    return Table(list(TABLE_COLUMNS), [[r.get(c) for c in TABLE_COLUMNS] for r in rows])


# ---------------------------------------------------------------------------
# uncalibrated variable (ET) on the surrogate path


def _surrogate_config(d: dict | None) -> tuple[SurrogateConfig, int, int, int]:
    d = dict(d or {})
    n_cells = int(d.pop("n_cells", 200))
    n_draws = int(d.pop("n_param_draws", 8))
    seed = int(d.get("seed", 0))
    return _dataclass_from(SurrogateConfig, d, "surrogate"), n_cells, n_draws, seed


def build_and_train_surrogate(dom, scfg: dict | None):
    """Surrogate trained on randomly chosen cells over the full forcing record."""
    sc, n_cells, n_draws, seed = _surrogate_config(scfg)
    if dom.config.model_kind != "vic_lite":
        raise ConfigError("the surrogate emulates VIC-lite; domain.model_kind must be 'vic_lite'")
    rng = np.random.default_rng([seed, 7])
    cells = np.sort(rng.choice(dom.n_cells, size=min(n_cells, dom.n_cells), replace=False))
    ds = build_surrogate_dataset([(dom.cell_id(c), dom.forcing[:, c], dom.attributes[c]) for c in cells],
                                 n_draws, seed, specs=dom.specs)
    return train_surrogate(ds, sc)


_SURROGATE_CACHE: dict[str, tuple] = {}


def _cached_surrogate(cfg: dict):
    if cfg.get("surrogate_checkpoint"):
        return Surrogate.load(cfg["surrogate_checkpoint"]), None
    key = json.dumps([cfg.get("domain"), cfg.get("data_dir"), cfg.get("surrogate")], sort_keys=True)
    if key not in _SURROGATE_CACHE:
        _SURROGATE_CACHE.clear()
        _SURROGATE_CACHE[key] = build_and_train_surrogate(get_domain(cfg), cfg.get("surrogate"))
    return _SURROGATE_CACHE[key]


def _et_stats(sim_mean: np.ndarray, true_mean: np.ndarray) -> tuple[float, float, float]:
    return corr(sim_mean, true_mean), float(np.mean(sim_mean - true_mean)), nse(sim_mean, true_mean)


def _vic_et(dom, raw: np.ndarray, cells) -> dict:
    full = full_matrix(descale(raw, calibrated(dom.specs)), dom.specs)
    return vic_lite.vic_lite_simulate(dom.forcing[:, list(cells)], full)


def _uncal_seed_task(cfg: dict, seed: int):
    dom = get_domain(cfg)
    sur, _ = _cached_surrogate(cfg)
    cells = sample_patches(dom, cfg.get("density", "s4"), seed)
    te = dom.test_slice
    true_mean = dom.true_et[te][:, cells].mean(axis=0)
    rows = []
    t0 = time.perf_counter()
    ds = DplDataset.from_domain(dom, cells, surrogate=sur)
    tc = train_config(cfg.get("dpl"), pbm="surrogate", seed=seed)
    res = _train(ds, tc)
    raw_dpl = infer_raw(res.model, ds, ds.training)
    t1 = time.perf_counter()
    sce = _calibrate_cells(dom, cells, sce_config(cfg.get("sceua"), seed=seed), surrogate=sur)
    raw_sce = np.stack([sce[c].best_x for c in cells])
    t2 = time.perf_counter()
    for method, raw in (("dpl", raw_dpl), ("sceua", raw_sce), ("truth", dom.true_raw[cells])):
        out = _vic_et(dom, raw, cells)
        c, b, n = _et_stats(out["et"][te].mean(axis=0), true_mean)
        sm_rmse = _pooled_rmse(out["sm"][te], dom.obs[te][:, cells])
        rows.append([seed, method, len(cells), c, b, n, sm_rmse])
    return rows, {"dpl_seconds": t1 - t0, "sceua_seconds": t2 - t1}


def run_uncalibrated_experiment(cfg: dict, jobs: int = 1) -> Report:
    t0 = time.perf_counter()
    dom = get_domain(cfg)
    seeds = [int(s) for s in (cfg.get("seeds") or [cfg.get("seed", 0)])]
    sur, fid = _cached_surrogate(cfg)
    t_sur = time.perf_counter() - t0
    results = pmap(_call, [(_uncal_seed_task, (cfg, s)) for s in seeds], jobs)
    rows, timing = [], {"surrogate_seconds": t_sur}
    for r, tm in results:
        rows += r
        timing[f"seed_{r[0][0]}"] = tm
    by = {m: [r[3] for r in rows if r[1] == m] for m in ("dpl", "sceua", "truth")}
    med = {m: float(np.median(v)) for m, v in by.items()}
    per_seed = {s: {r[1]: r[3] for r in rows if r[0] == s} for s in seeds}
    adv = [per_seed[s]["dpl"] - per_seed[s]["sceua"] for s in seeds]
    summary = {"experiment": "uncalibrated", "seeds": seeds, "median_et_corr": med,
               "et_corr_advantage": float(np.median(adv)),
               "et_corr_advantage_by_seed": {str(s): a for s, a in zip(seeds, adv)},
               "metrics": {f"{m}_et_corr": v for m, v in med.items()}}
    if fid is not None:
        summary["surrogate_fidelity"] = {v: fid.variables[v] for v in fid.variables}
    timing["total_seconds"] = time.perf_counter() - t0
    return Report({"et_report.csv": Table(["seed", "method", "n_cells", "et_corr", "et_bias", "et_nse",
                                           "sm_test_rmse"], rows)}, summary, timing)


# ---------------------------------------------------------------------------
# scaling curve (PUB k-fold over basins)


def _basin_dataset(bs: BasinSet, train_idx: Sequence[int], test_idx: Sequence[int], warmup: int) -> DplDataset:
    order = list(train_idx) + list(test_idx)
    attrs, forcing, q = bs.arrays(order)
    obs_sl = slice(warmup, forcing.shape[0])
    return DplDataset([bs.basins[i].id for i in order], attrs, forcing, q, obs_sl, obs_sl,
                      hbv.hbv_specs(), list(range(len(train_idx))))


def _scaling_task(cfg: dict, fraction: float, fold: int, train_idx: list[int], test_idx: list[int]):
    bs = _cached_basins(cfg)
    seed = int(cfg.get("seed", 0))
    usable = set(bs.usable())
    train_idx = [i for i in train_idx if i in usable]
    test_idx = [i for i in test_idx if i in usable]
    sub = subsample_training(train_idx, fraction, seed + fold, nested=True)
    warmup = _warmup_of(bs)
    ds = _basin_dataset(bs, sub, test_idx, warmup)
    dpl = dict(cfg.get("dpl") or {})
    steps = int(dpl.pop("train_steps", 300))
    batch = min(int(dpl.get("batch_sites", 16)), len(sub))
    n_evals = int(dpl.pop("n_evals", 10))
    tc = train_config(dpl, batch_sites=batch, max_epochs=steps * batch / len(sub),
                      eval_every=max(1, steps // n_evals), seed=seed * 1000 + fold)
    t0 = time.perf_counter()
    res = _train(ds, tc)
    held = list(range(len(sub), len(sub) + len(test_idx)))
    raw = infer_raw(res.model, ds, held)
    sim = simulate_numpy(ds, raw, ds.forcing[:, held], ds.attributes[held])
    sl = ds.test_slice
    rows = metric_table(sim[sl], ds.obs[sl][:, held], [ds.site_ids[i] for i in held])
    return fraction, fold, len(sub), rows, time.perf_counter() - t0


_BASIN_CACHE: dict[str, BasinSet] = {}


def _cached_basins(cfg: dict) -> BasinSet:
    key = json.dumps([cfg.get("basins"), cfg.get("data_dir")], sort_keys=True)
    if key not in _BASIN_CACHE:
        _BASIN_CACHE.clear()
        _BASIN_CACHE[key] = get_basins(cfg)
    return _BASIN_CACHE[key]


def _warmup_of(bs: BasinSet) -> int:
    """Leading steps without any observation across basins (forcing-only spin-up)."""
    q = np.stack([b.q for b in bs.basins], axis=1)
    has = np.isfinite(q).any(axis=1)
    return int(np.argmax(has)) if has.any() else 0


def kfold_tasks(cfg: dict, fraction: float) -> list[tuple]:
    bs = _cached_basins(cfg)
    folds = make_folds(len(bs), int(cfg.get("folds", 10)), int(cfg.get("seed", 0)))
    return [(cfg, float(fraction), int(f), tr.tolist(), te.tolist()) for f, tr, te in fold_rotations(folds)]


def kfold_metrics(cfg: dict, fraction: float = 1.0, jobs: int = 1) -> list[dict]:
    """Held-out per-basin metrics of a full k-fold run at one training fraction."""
    out = pmap(_scaling_task, kfold_tasks(cfg, fraction), jobs)
    rows = [r for res in out for r in res[3]]
    return sorted(rows, key=lambda r: r["site_id"])


def run_scaling_experiment(cfg: dict, jobs: int = 1) -> Report:
    t0 = time.perf_counter()
    fractions = [float(f) for f in (cfg.get("fractions") or [0.02, 0.05, 0.1, 0.25, 0.5, 1.0])]
    tasks = [t for f in fractions for t in kfold_tasks(cfg, f)]
    results = pmap(_scaling_task, tasks, jobs)
    report, per_basin, timing = [], [], {}
    med_kge = {}
    for f in fractions:
        res = [r for r in results if r[0] == f]
        rows = sorted([row for r in res for row in r[3]], key=lambda r: r["site_id"])
        med_kge[f] = _median(rows, "kge")
        report.append([f, int(round(np.mean([r[2] for r in res]))), len(rows), med_kge[f],
                       _median(rows, "nse"), _median(rows, "corr"), median_metric(rows, "kge")[1]])
        per_basin += [[f, row["site_id"], row["kge"], row["nse"]] for row in rows]
        timing[str(f)] = float(sum(r[4] for r in res))
    ref = (cfg.get("reference_kge"))
    match = None
    if ref is not None:
        pts = [(f, k) for f, k in med_kge.items() if k is not None]
        for (f0, k0), (f1, k1) in zip([(0.0, -np.inf)] + pts[:-1], pts):
            if k1 >= ref:
                match = f1 if not np.isfinite(k0) or k0 >= ref else f0 + (ref - k0) / (k1 - k0) * (f1 - f0)
                break
    ks = [med_kge[f] for f in fractions]
    checks = {}
    if None not in ks:
        checks["max_decrease"] = float(max([0.0] + [a - b for a, b in zip(ks[:-1], ks[1:])]))
        if 0.25 in med_kge and fractions[0] < 0.25 < fractions[-1]:
            checks["gain_low"] = med_kge[0.25] - ks[0]
            checks["gain_high"] = ks[-1] - med_kge[0.25]
    timing["total_seconds"] = time.perf_counter() - t0
    summary = {"experiment": "scaling", "fractions": fractions, "median_kge": {str(f): k for f, k in med_kge.items()},
               "reference_kge": ref, "fraction_matching_reference": match, "checks": checks,
               "metrics": {f"median_kge_{f}": k for f, k in med_kge.items()}}
    return Report({"scaling_report.csv": Table(["fraction", "n_train_basins", "n_test_basins", "median_kge",
                                                "median_nse", "median_corr", "n_kge_undefined"], report),
                   "scaling_basins.csv": Table(["fraction", "basin_id", "kge", "nse"], per_basin)},
                  summary, timing)


# ---------------------------------------------------------------------------
# seed sweep


EXPERIMENTS = {
    "run-density-experiment": run_density_experiment,
    "run-spatial-experiment": run_spatial_experiment,
    "run-uncalibrated-experiment": run_uncalibrated_experiment,
    "run-scaling-experiment": run_scaling_experiment,
}


def run_seed_sweep(cfg: dict, jobs: int = 1) -> tuple[Report, dict[int, Report]]:
    name = cfg["command"]
    if name not in EXPERIMENTS:
        raise ConfigError(f"command: unknown experiment {name!r}")
    seeds = [int(s) for s in cfg["seeds"]]
    if not seeds:
        raise ConfigError("seeds: empty list")
    sub = {}
    for s in seeds:
        c = dict(cfg.get("config") or {}, seed=s)
        sub[s] = EXPERIMENTS[name](c, jobs)
    long_rows, values = [], {}
    for s in seeds:
        for k, v in sorted(sub[s].summary.get("metrics", {}).items()):
            long_rows.append([s, k, v])
            values.setdefault(k, []).append(v)
    stats = []
    for k in sorted(values):
        vals = [v for v in values[k] if v is not None]
        if vals:
            stats.append([k, len(vals), float(np.mean(vals)), float(np.std(vals))])
        else:
            stats.append([k, 0, None, None])
    summary = {"experiment": "seed-sweep", "command": name, "seeds": seeds,
               "mean": {r[0]: r[2] for r in stats}, "std": {r[0]: r[3] for r in stats}}
    return Report({"seed_sweep.csv": Table(["seed", "metric", "value"], long_rows),
                   "seed_sweep_summary.csv": Table(["metric", "n", "mean", "std"], stats)},
                  summary, {s: r.timing for s, r in sub.items()}), sub
