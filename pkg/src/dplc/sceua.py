"""Shuffled complex evolution (SCE-UA) with per-site epoch accounting.

The optimizer is written as a generator that yields batches of candidate
points and receives their objective values, so that many independent
calibrations (one per site) can be advanced in lockstep while a batched
simulator evaluates all their candidates at once.  Each site still follows
exactly the sequence of points a standalone run with the same seed produces.

Algorithm constants follow the original recommendations: ``m = 2n + 1``
points per complex, simplexes of ``q = n + 1`` points chosen with
triangular probabilities ``2 (m + 1 - i) / (m (m + 1))``, one offspring per
competitive-evolution step, ``2n + 1`` steps per complex between shuffles.
Reflected and contracted points are clipped to the bounds; the fallback
mutation is uniform over the bounds.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class SceError(ValueError):
    pass


@dataclass(frozen=True)
class SceConfig:
    n_complexes: int = 7
    points_per_complex: int | None = None      # default 2n + 1
    evolution_steps: int | None = None         # default 2n + 1
    max_evals: int = 10000                     # per-site budget ("max epochs")
    kstop: int = 10                            # iterations looked back for convergence
    pcento: float = 1e-4                       # min relative improvement over kstop iterations
    peps: float = 1e-6                         # stop when normalized population range falls below
    seed: int = 0

    def __post_init__(self):
        if self.n_complexes < 1:
            raise SceError("n_complexes must be >= 1")
        if self.max_evals < 1:
            raise SceError("max_evals must be >= 1")

    def sizes(self, n: int) -> tuple[int, int, int, int]:
        """``(p, m, q, beta)`` for an ``n``-dimensional problem."""
        m = self.points_per_complex or 2 * n + 1
        beta = self.evolution_steps or 2 * n + 1
        q = n + 1
        if m < q:
            raise SceError(f"points_per_complex {m} smaller than simplex size {q}")
        return self.n_complexes, m, q, beta


@dataclass
class SceLedger:
    """Per-iteration record: cumulative evaluations and best objective."""
    evaluations: list[int] = field(default_factory=list)
    best: list[float] = field(default_factory=list)
    best_x: list[np.ndarray] = field(default_factory=list)

    def record(self, n_eval: int, best: float, x: np.ndarray):
        self.evaluations.append(int(n_eval))
        self.best.append(float(best))
        self.best_x.append(np.array(x, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.evaluations)


@dataclass
class SceResult:
    best_x: np.ndarray
    best_f: float
    n_evals: int
    ledger: SceLedger
    stop_reason: str


def _clean(values, k: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size != k:
        raise SceError(f"expected {k} objective values, got {v.size}")
    return np.where(np.isfinite(v), v, np.inf)


def sce_process(bounds, config: SceConfig, rng: np.random.Generator):
    """Generator: yields ``(k, n)`` candidate batches, expects ``k`` values back.

    Returns an :class:`SceResult` via ``StopIteration.value``.
    """
    b = np.asarray(bounds, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 2:
        raise SceError("bounds must be (n, 2)")
    lo, hi = b[:, 0], b[:, 1]
    width = hi - lo
    if np.any(width <= 0) or not np.isfinite(b).all():
        raise SceError("bounds must have positive, finite width")
    n = b.shape[0]
    p, m, q, beta = config.sizes(n)
    s = p * m
    per_iter_max = 3 * p * beta    # reflection + contraction + mutation for every step
    if config.max_evals < s + per_iter_max:
        raise SceError(f"budget {config.max_evals} exhausted before the first iteration "
                       f"(needs at least {s + per_iter_max} evaluations)")
    tri = 2.0 * (m - np.arange(m)) / (m * (m + 1.0))   # rank 0 (best) .. m-1

    x = lo + rng.random((s, n)) * width
    f = _clean((yield x), s)
    n_eval = s
    order = np.argsort(f, kind="stable")
    x, f = x[order], f[order]
    ledger = SceLedger()
    history = []
    stop = "max_evals"

    while True:
        # partition by stride: complex k gets ranks k, k+p, k+2p, ...
        cx = np.stack([x[k::p] for k in range(p)])      # (p, m, n)
        cf = np.stack([f[k::p] for k in range(p)])      # (p, m)
        for _ in range(beta):
            picks = np.stack([np.sort(rng.choice(m, size=q, replace=False, p=tri)) for _ in range(p)])
            sx = np.take_along_axis(cx, picks[:, :, None], axis=1)   # (p, q, n)
            sf = np.take_along_axis(cf, picks, axis=1)
            worst = sx[:, -1]
            centroid = sx[:, :-1].mean(axis=1)
            refl = np.clip(2.0 * centroid - worst, lo, hi)
            fr = _clean((yield refl), p)
            n_eval += p
            new_x, new_f = refl.copy(), fr.copy()
            fail = fr >= sf[:, -1]
            if fail.any():
                idx = np.flatnonzero(fail)
                contr = np.clip(0.5 * (centroid[idx] + worst[idx]), lo, hi)
                fc = _clean((yield contr), idx.size)
                n_eval += idx.size
                new_x[idx], new_f[idx] = contr, fc
                still = fc >= sf[idx, -1]
                if still.any():
                    jdx = idx[still]
                    rnd = lo + rng.random((jdx.size, n)) * width
                    fz = _clean((yield rnd), jdx.size)
                    n_eval += jdx.size
                    new_x[jdx], new_f[jdx] = rnd, fz
            # write offspring over the simplex worst, then re-sort each complex
            rows = np.arange(p)
            cx[rows, picks[:, -1]] = new_x
            cf[rows, picks[:, -1]] = new_f
            srt = np.argsort(cf, axis=1, kind="stable")
            cx = np.take_along_axis(cx, srt[:, :, None], axis=1)
            cf = np.take_along_axis(cf, srt, axis=1)
        # shuffle
        x = cx.reshape(s, n)
        f = cf.reshape(s)
        order = np.argsort(f, kind="stable")
        x, f = x[order], f[order]
        ledger.record(n_eval, f[0], x[0])
        history.append(f[0])

        if n_eval + per_iter_max > config.max_evals:
            stop = "max_evals"
            break
        if len(history) > config.kstop and config.pcento > 0:
            old = history[-1 - config.kstop]
            if np.isfinite(old) and abs(old - f[0]) <= config.pcento * max(abs(old), 1e-300):
                stop = "converged"
                break
        if config.peps > 0:
            spread = (x.max(axis=0) - x.min(axis=0)) / width
            if np.exp(np.mean(np.log(np.maximum(spread, 1e-300)))) < config.peps:
                stop = "population_collapsed"
                break
    return SceResult(x[0].copy(), float(f[0]), n_eval, ledger, stop)


def sceua_calibrate(objective: Callable[[np.ndarray], float], bounds, config: SceConfig = SceConfig(),
                    batch_objective: Callable[[np.ndarray], np.ndarray] | None = None) -> SceResult:
    """Minimize ``objective`` over the box ``bounds`` (``(n, 2)``).

    ``batch_objective`` (points ``(k, n)`` -> values ``(k,)``), when given,
    replaces per-point calls.  Non-finite values count as ``+inf``.
    """
    rng = np.random.default_rng(config.seed)
    gen = sce_process(bounds, config, rng)
    try:
        pts = next(gen)
        while True:
            if batch_objective is not None:
                vals = batch_objective(pts)
            else:
                vals = [objective(pt) for pt in pts]
            pts = gen.send(vals)
    except StopIteration as stop:
        return stop.value


def site_seed(global_seed: int, site_id) -> int:
    """Seed derived from (global seed, site id) only, independent of processing order."""
    h = hashlib.sha256(f"{int(global_seed)}:{site_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class SiteResult:
    site_id: str
    result: SceResult | None
    error: str | None = None


def site_rmse(sim: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Column-wise RMSE of ``(T, k)`` arrays over finite observations."""
    ok = np.isfinite(obs)
    d = np.where(ok, sim - np.where(ok, obs, 0.0), 0.0)
    n = ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sqrt((d * d).sum(axis=0) / n)
    return np.where(n > 0, r, np.nan)


def calibrate_sites(site_ids: Sequence, simulator, obs: np.ndarray, bounds,
                    config: SceConfig = SceConfig()) -> dict[str, SiteResult]:
    """Calibrate every site independently on its RMSE, evaluating in lockstep.

    ``simulator(sites, points)`` gets an integer array of site positions
    (into ``site_ids``) and the matching ``(k, n)`` points and returns the
    ``(T, k)`` simulated series compared against ``obs[:, sites]``.  Each
    site's seed depends only on ``(config.seed, site_id)``, so results do not
    depend on which other sites share the batch.  A site whose simulation
    raises is recorded with its error; the others proceed.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != len(site_ids):
        raise SceError("obs must be (T, n_sites)")

    def evaluate(sites, pts):
        return site_rmse(np.asarray(simulator(sites, pts), dtype=np.float64), obs[:, sites])

    gens, pending = {}, {}
    out: dict[str, SiteResult] = {}
    for k, sid in enumerate(site_ids):
        cfg = _with_seed(config, site_seed(config.seed, sid))
        g = sce_process(bounds, cfg, np.random.default_rng(cfg.seed))
        pending[k] = next(g)
        gens[k] = g
    while pending:
        keys = sorted(pending)
        sites = np.concatenate([np.full(len(pending[k]), k) for k in keys])
        pts = np.concatenate([pending[k] for k in keys])
        try:
            vals = evaluate(sites, pts)
        except Exception:
            # isolate the failing site(s)
            vals = np.empty(len(pts))
            for k in keys:
                sel = sites == k
                try:
                    vals[sel] = evaluate(sites[sel], pts[sel])
                except Exception as e:
                    log.warning("site %s failed: %s", site_ids[k], e)
                    out[str(site_ids[k])] = SiteResult(str(site_ids[k]), None, f"{type(e).__name__}: {e}")
        nxt = {}
        for k in keys:
            if str(site_ids[k]) in out:
                continue
            try:
                nxt[k] = gens[k].send(vals[sites == k])
            except StopIteration as stop:
                out[str(site_ids[k])] = SiteResult(str(site_ids[k]), stop.value)
        pending = nxt
    return {str(s): out[str(s)] for s in site_ids}


def _with_seed(cfg: SceConfig, seed: int) -> SceConfig:
    return SceConfig(cfg.n_complexes, cfg.points_per_complex, cfg.evolution_steps, cfg.max_evals,
                     cfg.kstop, cfg.pcento, cfg.peps, seed)


def iteration_trace(results: Sequence[SceResult], score_fn) -> list[tuple[float, float]]:
    """Domain-level trace over SCE-UA iterations.

    For iteration ``i`` the epoch is the mean over sites of evaluations done
    by the end of that iteration, and the score is ``score_fn`` applied to
    the ``(n_sites, n)`` matrix of each site's best point at that iteration
    (sites that stopped early keep their final best).
    """
    n_iter = max(len(r.ledger) for r in results)
    trace = []
    for i in range(n_iter):
        ev, xs = [], []
        for r in results:
            j = min(i, len(r.ledger) - 1)
            ev.append(r.ledger.evaluations[j])
            xs.append(r.ledger.best_x[j])
        trace.append((float(np.mean(ev)), float(score_fn(np.stack(xs)))))
    return trace


def write_site_csv(path, results: dict[str, SiteResult], param_names: Sequence[str] | None = None) -> None:
    k = None
    for r in results.values():
        if r.result is not None:
            k = r.result.best_x.size
            break
    k = k or (len(param_names) if param_names else 0)
    names = list(param_names) if param_names else [f"param_{i + 1}" for i in range(k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "best_rmse", "evaluations"] + names)
        for sid, r in results.items():
            if r.result is None:
                w.writerow([sid, "", ""] + [""] * k)
            else:
                w.writerow([sid, repr(r.result.best_f), r.result.n_evals]
                           + [repr(float(v)) for v in r.result.best_x])
