"""Simulation skill metrics: bias, ubRMSE, correlation, NSE and KGE.

All functions pair ``sim`` and ``obs`` elementwise and keep only pairs where
both values are finite.  When a metric is mathematically undefined (no
pairs, zero variance, zero mean) :class:`MetricUndefined` is raised; the
tabulating helpers turn that into ``None`` so that "undefined" never gets
confused with a numeric 0 or leaks NaN into aggregates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np


class MetricUndefined(ValueError):
    pass


def paired(sim, obs) -> tuple[np.ndarray, np.ndarray]:
    sim = np.asarray(sim, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if sim.shape != obs.shape:
        raise ValueError(f"sim and obs lengths differ: {sim.size} vs {obs.size}")
    keep = np.isfinite(sim) & np.isfinite(obs)
    return sim[keep], obs[keep]


def _need(n: int, k: int, name: str):
    if n < k:
        raise MetricUndefined(f"{name}: needs at least {k} valid pairs, got {n}")


def _flat(d: np.ndarray, x: np.ndarray) -> bool:
    """True when the centred series ``d`` of ``x`` is zero up to roundoff."""
    return bool(np.max(np.abs(d)) <= 8 * np.finfo(float).eps * np.max(np.abs(x)))


def bias(sim, obs) -> float:
    """Mean of ``sim - obs``."""
    s, o = paired(sim, obs)
    _need(s.size, 1, "bias")
    return float(np.mean(s - o))


def ubrmse(sim, obs) -> float:
    """RMSE after removing each series' mean (bias-free random error)."""
    s, o = paired(sim, obs)
    _need(s.size, 1, "ubrmse")
    d = (s - s.mean()) - (o - o.mean())
    return float(np.sqrt(np.mean(d * d)))


def rmse(sim, obs) -> float:
    s, o = paired(sim, obs)
    _need(s.size, 1, "rmse")
    return float(np.sqrt(np.mean((s - o) ** 2)))


def corr(sim, obs) -> float:
    """Pearson correlation; undefined if either series is constant."""
    s, o = paired(sim, obs)
    _need(s.size, 2, "corr")
    ds, do = s - s.mean(), o - o.mean()
    ss, so = np.sum(ds * ds), np.sum(do * do)
    if _flat(ds, s) or _flat(do, o):
        raise MetricUndefined("corr: zero variance series")
    return float(np.sum(ds * do) / (np.sqrt(ss) * np.sqrt(so)))


def nse(sim, obs) -> float:
    """Nash-Sutcliffe efficiency: ``1 - SSE / sum((obs - mean(obs))**2)``."""
    s, o = paired(sim, obs)
    _need(s.size, 2, "nse")
    do = o - o.mean()
    denom = np.sum(do * do)
    if _flat(do, o):
        raise MetricUndefined("nse: observations have zero variance")
    return float(1.0 - np.sum((o - s) ** 2) / denom)


def kge(sim, obs) -> tuple[float, float, float, float]:
    """Kling-Gupta efficiency and its components ``(kge, r, beta, gamma)``.

    ``beta = mu_s / mu_o``; ``gamma = (sigma_s / mu_s) / (sigma_o / mu_o)``.
    """
    s, o = paired(sim, obs)
    _need(s.size, 2, "kge")
    mu_s, mu_o = s.mean(), o.mean()
    if mu_o == 0.0 or mu_s == 0.0:
        raise MetricUndefined("kge: zero mean series")
    r = corr(s, o)
    beta = mu_s / mu_o
    gamma = (s.std() / mu_s) / (o.std() / mu_o)
    value = 1.0 - math.sqrt((r - 1.0) ** 2 + (beta - 1.0) ** 2 + (gamma - 1.0) ** 2)
    return float(value), float(r), float(beta), float(gamma)


@dataclass
class MetricReport:
    n_pairs: int
    bias: float | None = None
    ubrmse: float | None = None
    corr: float | None = None
    nse: float | None = None
    kge: float | None = None
    kge_r: float | None = None
    kge_beta: float | None = None
    kge_gamma: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_NAMES = ("bias", "ubrmse", "corr", "nse", "kge", "kge_r", "kge_beta", "kge_gamma")
TABLE_COLUMNS = ("site_id", "n_pairs") + METRIC_NAMES


def _try(fn, *args):
    try:
        return fn(*args)
    except MetricUndefined:
        return None


def kge_components(sim, obs) -> dict:
    """KGE components where defined, each independently of the others."""
    s, o = paired(sim, obs)
    out = {"kge": None, "kge_r": None, "kge_beta": None, "kge_gamma": None}
    if s.size < 2:
        return out
    mu_s, mu_o = s.mean(), o.mean()
    out["kge_r"] = _try(corr, s, o)
    if mu_o != 0.0:
        out["kge_beta"] = float(mu_s / mu_o)
    if mu_o != 0.0 and mu_s != 0.0 and o.std() != 0.0:
        out["kge_gamma"] = float((s.std() / mu_s) / (o.std() / mu_o))
    full = _try(kge, s, o)
    if full is not None:
        out["kge"] = full[0]
    return out


def metric_report(sim, obs) -> MetricReport:
    s, o = paired(sim, obs)
    rep = MetricReport(n_pairs=int(s.size))
    rep.bias = _try(bias, s, o)
    rep.ubrmse = _try(ubrmse, s, o)
    rep.corr = _try(corr, s, o)
    rep.nse = _try(nse, s, o)
    for k, v in kge_components(s, o).items():
        setattr(rep, k, v)
    return rep


def metric_table(sim: np.ndarray, obs: np.ndarray, site_ids: Sequence) -> list[dict]:
    """Per-site reports for ``(time, site)`` arrays."""
    rows = []
    for j, sid in enumerate(site_ids):
        rep = metric_report(sim[:, j], obs[:, j])
        rows.append({"site_id": sid, **rep.to_dict()})
    return rows


def median_metric(rows: Iterable[dict], name: str) -> tuple[float | None, int]:
    """Median of a per-site metric over defined sites; returns ``(median, n_undefined)``."""
    vals, n_undef = [], 0
    for r in rows:
        v = r.get(name)
        if v is None:
            n_undef += 1
        else:
            vals.append(v)
    return (float(np.median(vals)) if vals else None), n_undef


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metric_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([format_value(r.get(c)) for c in TABLE_COLUMNS])


def read_metric_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"site_id": r["site_id"], "n_pairs": int(r["n_pairs"])}
            for name in METRIC_NAMES:
                row[name] = float(r[name]) if r[name] != "" else None
            out.append(row)
    return out


def field_names() -> list[str]:
    return [f.name for f in fields(MetricReport)]
