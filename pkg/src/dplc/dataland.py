"""Synthetic grids and basin sets with known parameter fields, plus CSV I/O.

A domain is a pure function of its :class:`DomainConfig`.  Attributes are
smoothed Gaussian random fields; true parameters are closed-form transfer
functions of the attributes,

    raw_j = lo + (hi - lo) * sigmoid(gain * sum_i c_ji * a_i / ||c_j||)

over 2-3 attributes per parameter (``lo, hi = 0.1, 0.9`` keeps truth off the
bounds), descaled into the model's parameter bounds.  Observations are the
model simulation plus Gaussian noise with ``sigma = noise_frac * std(signal)``
taken over the whole domain.

Cells are indexed row-major, ``cell = r * n_cols + c``; "north" is the
decreasing row index.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit, ndtr

from . import hbv, vic_lite
from .params import ParamSpec, calibrated, descale, full_matrix

log = logging.getLogger(__name__)

PATCH_SIZES = {"s4": 4, "s8": 8, "s16": 16}
NEIGHBOR_OFFSET = (-3, 3)
FORCING_COLUMNS = ("precip_mm", "temp_c", "pet_mm")
DOMAIN_FORMAT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DomainConfig:
    rows: int = 64
    cols: int = 64
    n_attr: int = 6
    seed: int = 0
    model_kind: str = "hbv"          # "hbv" or "vic_lite"
    n_warmup_days: int = 365         # forcing-only spin-up before the observed record
    n_train_days: int = 730
    n_test_days: int = 365
    noise_frac: float = 0.05
    smoothing: float = 3.0           # attribute-field Gaussian kernel sigma, cells
    weather_smoothing: float = 6.0   # daily weather-field kernel sigma, cells
    truth_gain: float = 1.5
    start_date: str = "2001-01-01"

    def __post_init__(self):
        if self.model_kind not in ("hbv", "vic_lite"):
            raise DataError(f"model_kind must be 'hbv' or 'vic_lite', got {self.model_kind!r}")
        if self.rows <= 0 or self.cols <= 0:
            raise DataError("grid dimensions must be positive")
        if self.n_attr < 2:
            raise DataError("need at least 2 attributes (two drive the climate)")
        if self.noise_frac < 0:
            raise DataError("noise_frac must be non-negative")
        if self.n_train_days < 1 or self.n_test_days < 0 or self.n_warmup_days < 0:
            raise DataError("bad period lengths")

    @property
    def n_days(self) -> int:
        return self.n_warmup_days + self.n_train_days + self.n_test_days

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise DataError(f"unknown domain config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class GridDomain:
    config: DomainConfig
    attributes: np.ndarray          # (n_cells, k)
    attr_names: list[str]
    forcing: np.ndarray             # (T, n_cells, 3)
    specs: list[ParamSpec]          # full model parameter list
    true_raw: np.ndarray            # (n_cells, n_calibrated) in [0, 1]
    truth: np.ndarray               # (T, n_cells) noise-free observed variable
    obs: np.ndarray                 # (T, n_cells)
    noise_sigma: float
    transfer: dict                  # closed-form truth transfer description
    true_et: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.config.rows

    @property
    def cols(self) -> int:
        return self.config.cols

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def warmup_slice(self) -> slice:
        return slice(0, self.config.n_warmup_days)

    @property
    def train_slice(self) -> slice:
        """Observed training record; simulations always start at day 0."""
        w = self.config.n_warmup_days
        return slice(w, w + self.config.n_train_days)

    @property
    def test_slice(self) -> slice:
        return slice(self.config.n_warmup_days + self.config.n_train_days, self.config.n_days)

    @property
    def true_params(self) -> np.ndarray:
        """Physical values of the calibrated parameters, ``(n_cells, n_calibrated)``."""
        return descale(self.true_raw, calibrated(self.specs))

    def full_params(self, raw: np.ndarray | None = None) -> np.ndarray:
        raw = self.true_raw if raw is None else raw
        return full_matrix(descale(raw, calibrated(self.specs)), self.specs)

    def cell_index(self, r: int, c: int) -> int:
        return r * self.cols + c

    def cell_rc(self, cell: int) -> tuple[int, int]:
        return divmod(int(cell), self.cols)

    def cell_id(self, cell: int) -> str:
        r, c = self.cell_rc(cell)
        return f"r{r:03d}c{c:03d}"

    def dates(self) -> list[str]:
        return date_range(self.config.start_date, self.config.n_days)


def date_range(start: str, n: int) -> list[str]:
    d0 = np.datetime64(start, "D")
    return [str(d0 + np.timedelta64(i, "D")) for i in range(n)]


def model_specs(model_kind: str) -> list[ParamSpec]:
    return hbv.hbv_specs() if model_kind == "hbv" else vic_lite.vic_specs()


def _field(rng, shape, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="reflect")
    return (f - f.mean()) / f.std()


def _climate_fields(rng, cfg: DomainConfig, a_precip, a_temp):
    """Daily forcing on the grid.

    temp: seasonal sinusoid around ``6 + 6 * a_temp`` with a lag-1 AR(0.7)
    anomaly; precip: wet days where a smoothed daily field falls under the
    local wet-day probability, amounts from a two-component exponential
    mixture scaled by ``2.5 * exp(0.35 * a_precip)``; pet: temperature-based
    (Oudin form) ``Ra_t * (T + 5) / 100`` for ``T > -5``.
    """
    n_t, shape = cfg.n_days, (cfg.rows, cfg.cols)
    t = np.arange(n_t)
    season = np.sin(2.0 * np.pi * (t - 110) / 365.25)
    t_mean = 6.0 + 6.0 * a_temp
    t_amp = 10.0 + 2.0 * np.tanh(a_temp)
    p_wet = 0.32 + 0.12 * np.tanh(a_precip)
    p_scale = 2.5 * np.exp(0.35 * a_precip)
    ra = 10.0 + 5.0 * np.sin(2.0 * np.pi * (t - 80) / 365.25)

    temp = np.empty((n_t,) + shape)
    precip = np.empty((n_t,) + shape)
    anom = np.zeros(shape)
    ws = cfg.weather_smoothing
    for k in range(n_t):
        shock = _field(rng, shape, ws)
        anom = 0.7 * anom + math.sqrt(1 - 0.49) * 2.5 * shock
        temp[k] = t_mean + t_amp * season[k] + anom
        u_wet = ndtr(_field(rng, shape, ws))
        u_amt = ndtr(_field(rng, shape, ws))
        big = rng.random(shape) < 0.3
        depth = -np.log1p(-np.clip(u_amt, 0, 1 - 1e-12)) * np.where(big, 2.2, 0.6) * p_scale / p_wet
        precip[k] = np.where(u_wet < p_wet, depth, 0.0)
    pet = np.maximum(ra[:, None, None] * (temp + 5.0) / 100.0, 0.0)
    f = np.stack([precip, temp, pet], axis=-1)
    return f.reshape(n_t, cfg.rows * cfg.cols, 3)


def _transfer(rng, n_attr: int, n_params: int, gain: float) -> dict:
    terms = []
    for _ in range(n_params):
        k = int(rng.integers(2, 4)) if n_attr >= 3 else 2
        idx = np.sort(rng.choice(n_attr, size=k, replace=False))
        coef = rng.standard_normal(k)
        coef = coef / np.linalg.norm(coef)
        terms.append({"attrs": idx.tolist(), "coef": coef.tolist()})
    return {"form": "lo+(hi-lo)*sigmoid(gain*sum(coef*attr))", "lo": 0.1, "hi": 0.9,
            "gain": gain, "terms": terms}


def apply_transfer(transfer: dict, attributes: np.ndarray) -> np.ndarray:
    """Raw (0, 1) truth parameters from standardized attributes."""
    cols = []
    for term in transfer["terms"]:
        z = attributes[:, term["attrs"]] @ np.asarray(term["coef"])
        cols.append(transfer["lo"] + (transfer["hi"] - transfer["lo"]) * expit(transfer["gain"] * z))
    return np.stack(cols, axis=-1)


def simulate_truth(model_kind: str, forcing: np.ndarray, full_params: np.ndarray):
    """Noise-free observed variable (discharge or surface wetness) and ET."""
    if model_kind == "hbv":
        q, et = hbv.hbv_run(forcing, full_params, return_et=True)
        return q, et
    out = vic_lite.vic_lite_simulate(forcing, full_params)
    return out["sm"], out["et"]


def generate_domain(rows: int = 64, cols: int = 64, n_attr: int = 6, seed: int = 0,
                    model_kind: str = "hbv", **kw) -> GridDomain:
    cfg = DomainConfig(rows=rows, cols=cols, n_attr=n_attr, seed=seed, model_kind=model_kind, **kw)
    return build_domain(cfg)


def build_domain(cfg: DomainConfig) -> GridDomain:
    if cfg.rows % 16 or cfg.cols % 16:
        raise DataError(f"grid {cfg.rows}x{cfg.cols}: both dimensions must be multiples of 16")
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.rows, cfg.cols)
    fields = np.stack([_field(rng, shape, cfg.smoothing) for _ in range(cfg.n_attr)], axis=-1)
    attrs = fields.reshape(-1, cfg.n_attr)
    names = ["precip_index", "temp_index"] + [f"attr_{i}" for i in range(2, cfg.n_attr)]
    forcing = _climate_fields(rng, cfg, fields[..., 0], fields[..., 1])

    specs = model_specs(cfg.model_kind)
    cal = calibrated(specs)
    transfer = _transfer(rng, cfg.n_attr, len(cal), cfg.truth_gain)
    true_raw = apply_transfer(transfer, attrs)
    full = full_matrix(descale(true_raw, cal), specs)
    truth, et = simulate_truth(cfg.model_kind, forcing, full)
    sigma = cfg.noise_frac * float(np.std(truth[cfg.n_warmup_days:]))
    noise = rng.standard_normal(truth.shape) * sigma if sigma > 0 else 0.0
    obs = truth + noise
    obs[: cfg.n_warmup_days] = np.nan
    return GridDomain(cfg, attrs, names, forcing, specs, true_raw, truth, obs, sigma, transfer, et)


def adjacent_correlation(domain: GridDomain) -> np.ndarray:
    """Per-attribute correlation between horizontally and vertically adjacent cells."""
    f = domain.attributes.reshape(domain.rows, domain.cols, -1)
    out = []
    for k in range(f.shape[-1]):
        a = np.concatenate([f[:, :-1, k].ravel(), f[:-1, :, k].ravel()])
        b = np.concatenate([f[:, 1:, k].ravel(), f[1:, :, k].ravel()])
        out.append(np.corrcoef(a, b)[0, 1])
    return np.array(out)


# ---------------------------------------------------------------------------
# sampling + neighbours


def sample_patches(domain, density: str, seed: int) -> list[int]:
    """One uniformly chosen cell per non-overlapping ``p x p`` patch (sorted).

    Draws are nested across densities under a shared seed: the s16 cell of a
    16x16 patch is kept as the s8 cell of the 8x8 sub-patch containing it,
    and likewise from s8 to s4, so ``s16 <= s8 <= s4`` as sets.  Every cell
    is still uniform within its own patch.
    """
    if density not in PATCH_SIZES:
        raise DataError(f"density must be one of {sorted(PATCH_SIZES)}, got {density!r}")
    p = PATCH_SIZES[density]
    rows, cols = domain.rows, domain.cols
    if rows % p or cols % p:
        raise DataError(f"grid {rows}x{cols} not divisible by patch size {p}")
    rng = np.random.default_rng(seed)
    sizes = sorted(PATCH_SIZES.values(), reverse=True)
    chosen: set[tuple[int, int]] = set()
    for size in sizes:
        if rows % size or cols % size:
            continue
        level = set()
        for pr in range(rows // size):
            for pc in range(cols // size):
                dr, dc = rng.integers(0, size, size=2)
                r0, c0 = pr * size, pc * size
                inside = [rc for rc in chosen if r0 <= rc[0] < r0 + size and c0 <= rc[1] < c0 + size]
                level.add(inside[0] if inside else (r0 + int(dr), c0 + int(dc)))
        chosen = level
        if size == p:
            break
    return sorted(r * cols + c for r, c in chosen)


def neighbor_of(cell: tuple[int, int], rows: int | None = None, cols: int | None = None):
    """The cell 3 rows north and 3 columns east, or None when off-grid."""
    r, c = cell[0] + NEIGHBOR_OFFSET[0], cell[1] + NEIGHBOR_OFFSET[1]
    if r < 0 or c < 0:
        return None
    if (rows is not None and r >= rows) or (cols is not None and c >= cols):
        return None
    return (r, c)


def neighbor_pairs(domain, training_cells: Sequence[int]) -> list[tuple[int, int]]:
    """``(train_cell, neighbor_cell)`` pairs; off-grid and training-set neighbours are skipped."""
    train = set(int(c) for c in training_cells)
    pairs = []
    for cell in training_cells:
        nb = neighbor_of(domain.cell_rc(cell), domain.rows, domain.cols)
        if nb is None:
            log.warning("cell %s: neighbour falls outside the grid, skipped", domain.cell_id(cell))
            continue
        j = domain.cell_index(*nb)
        if j in train:
            log.warning("cell %s: neighbour %s is a training cell, skipped",
                        domain.cell_id(cell), domain.cell_id(j))
            continue
        pairs.append((int(cell), j))
    return pairs


def nearest_cell(domain, target: int, candidates: Sequence[int]) -> int:
    """Nearest candidate by Euclidean grid distance; ties go to the lowest index."""
    tr, tc = domain.cell_rc(target)
    best, best_d = None, None
    for c in sorted(candidates):
        r, cc = domain.cell_rc(c)
        d = (r - tr) ** 2 + (cc - tc) ** 2
        if best_d is None or d < best_d:
            best, best_d = c, d
    return int(best)


# ---------------------------------------------------------------------------
# basin sets


@dataclass
class BasinRecord:
    id: str
    attributes: np.ndarray
    forcing: np.ndarray             # (T, 3)
    q: np.ndarray                   # (T,), NaN = missing
    flagged: bool = False


@dataclass
class BasinSet:
    basins: list[BasinRecord]
    attr_names: list[str]
    dates: list[str]
    folds: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [b.id for b in self.basins]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate basin ids")

    def __len__(self) -> int:
        return len(self.basins)

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self.basins]

    def usable(self) -> list[int]:
        return [i for i, b in enumerate(self.basins) if not b.flagged]

    def arrays(self, idx: Sequence[int]):
        """Stack ``(attributes (n, k), forcing (T, n, 3), q (T, n))`` for the given indices."""
        idx = list(idx)
        attrs = np.stack([self.basins[i].attributes for i in idx])
        forcing = np.stack([self.basins[i].forcing for i in idx], axis=1)
        q = np.stack([self.basins[i].q for i in idx], axis=1)
        return attrs, forcing, q


def generate_basins(n: int = 400, seed: int = 0, n_days: int = 1461, n_attr: int = 6,
                    noise_frac: float = 0.05, grid: int = 64) -> BasinSet:
    """Synthetic HBV basin set: ``n`` distinct cells of a ``grid x grid`` domain."""
    if n > grid * grid:
        raise DataError("more basins than grid cells")
    cfg = DomainConfig(rows=grid, cols=grid, n_attr=n_attr, seed=seed, model_kind="hbv",
                       n_train_days=n_days, n_test_days=0, noise_frac=noise_frac)
    dom = build_domain(cfg)
    rng = np.random.default_rng([seed, 1])
    cells = np.sort(rng.choice(dom.n_cells, size=n, replace=False))
    basins = [BasinRecord(f"b{k:04d}", dom.attributes[c].copy(), dom.forcing[:, c].copy(),
                          dom.obs[:, c].copy()) for k, c in enumerate(cells)]
    meta = {"source": "synthetic", "domain": cfg.to_dict(), "cells": cells.tolist(),
            "noise_sigma": dom.noise_sigma}
    return BasinSet(basins, list(dom.attr_names), dom.dates(), meta=meta)


def make_folds(basins, k: int = 10, seed: int = 0) -> np.ndarray:
    """Random fold label per basin with fold sizes within one of each other."""
    n = len(basins) if not isinstance(basins, int) else basins
    if k < 1 or k > n:
        raise DataError(f"need 1 <= k <= n basins, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % k
    return labels[rng.permutation(n)]


def fold_rotations(folds: np.ndarray):
    """Yield ``(fold, train_idx, test_idx)`` for each fold held out in turn."""
    folds = np.asarray(folds)
    for f in range(int(folds.max()) + 1):
        yield f, np.flatnonzero(folds != f), np.flatnonzero(folds == f)


def subsample_training(basins: Sequence, fraction: float, seed: int, nested: bool = False) -> list:
    """``floor(fraction * n)`` items, uniform without replacement, in original order.

    With ``nested`` a single permutation (depending only on the seed) is cut
    at different lengths, so smaller fractions are subsets of larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    items = list(basins)
    n = len(items)
    m = int(math.floor(fraction * n + 1e-9))
    if m == n:
        return items
    if nested:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.random.default_rng([seed, int(round(fraction * 1e6))]).permutation(n)
    keep = np.sort(order[:m])
    return [items[i] for i in keep]


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not rows:
        raise DataError(f"{path}: empty file")
    return [h.strip() for h in rows[0]], [r for r in rows[1:] if r]


def _float(s: str, where: str) -> float:
    s = s.strip()
    if s == "" or s.lower() in ("nan", "na"):
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise DataError(f"{where}: not a number: {s!r}") from None


def _series(path: Path, columns: Sequence[str]) -> dict[str, tuple[float, ...]]:
    header, rows = _read_csv(path)
    need = ("date",) + tuple(columns)
    missing = [c for c in need if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    pos = [header.index(c) for c in need]
    out = {}
    for k, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{path}: line {k + 2} has {len(r)} fields, expected {len(header)}")
        date = r[pos[0]].strip()
        if date in out:
            raise DataError(f"{path}: duplicate date {date}")
        out[date] = tuple(_float(r[p], f"{path}:{k + 2}") for p in pos[1:])
    return out


def load_basin_csv(directory, impute: bool = False) -> BasinSet:
    """Read ``attributes.csv`` + ``forcing_<id>.csv`` + ``q_<id>.csv``.

    Basins with a missing attribute are flagged (and excluded by
    :meth:`BasinSet.usable`) unless ``impute`` is set, in which case the
    column mean over the other basins is used.  Dates are intersected across
    all basins and files.
    """
    d = Path(directory)
    header, rows = _read_csv(d / "attributes.csv")
    if not header or header[0] != "id":
        raise DataError(f"{d / 'attributes.csv'}: first column must be 'id'")
    names = header[1:]
    ids, attrs = [], []
    for k, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"attributes.csv line {k + 2}: expected {len(header)} fields")
        ids.append(r[0].strip())
        attrs.append([_float(v, f"attributes.csv:{k + 2}") for v in r[1:]])
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"duplicate basin ids: {dup}")
    attrs = np.asarray(attrs, dtype=np.float64).reshape(len(ids), len(names))
    flagged = ~np.isfinite(attrs).all(axis=1)
    if impute and flagged.any():
        col_mean = np.nanmean(attrs, axis=0)
        attrs = np.where(np.isfinite(attrs), attrs, col_mean)
        flagged = np.zeros(len(ids), dtype=bool)

    forcings, qs = {}, {}
    for bid in ids:
        fp, qp = d / f"forcing_{bid}.csv", d / f"q_{bid}.csv"
        if not fp.exists():
            raise DataError(f"basin {bid}: missing forcing file {fp.name}")
        if not qp.exists():
            raise DataError(f"basin {bid}: missing discharge file {qp.name}")
        forcings[bid] = _series(fp, FORCING_COLUMNS)
        qs[bid] = _series(qp, ("q_mm",))
    common = None
    for bid in ids:
        s = set(forcings[bid]) & set(qs[bid])
        common = s if common is None else common & s
    if not common:
        raise DataError("date ranges of the basins do not intersect")
    dates = sorted(common)
    basins = []
    for k, bid in enumerate(ids):
        f = np.array([forcings[bid][t] for t in dates])
        if not np.isfinite(f).all():
            raise DataError(f"basin {bid}: missing forcing values inside the common period")
        q = np.array([qs[bid][t][0] for t in dates])
        basins.append(BasinRecord(bid, attrs[k], f, q, bool(flagged[k])))
    if flagged.any():
        log.warning("basins with missing attributes excluded: %s", [b.id for b in basins if b.flagged])
    return BasinSet(basins, names, dates, meta={"source": str(d)})


def write_basin_csv(basins: BasinSet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "attributes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + list(basins.attr_names))
        for b in basins.basins:
            w.writerow([b.id] + [repr(float(v)) for v in b.attributes])
    for b in basins.basins:
        _write_series(d / f"forcing_{b.id}.csv", ("date",) + FORCING_COLUMNS, basins.dates, b.forcing)
        _write_series(d / f"q_{b.id}.csv", ("date", "q_mm"), basins.dates, b.q[:, None])


def _write_series(path: Path, header, dates, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in zip(dates, values):
            w.writerow([t] + ["" if not np.isfinite(v) else repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# domain persistence


def save_domain(domain: GridDomain, directory, write_cells: bool = True) -> None:
    """Write ``domain.json``, ``attributes.csv``, ``truth_params.csv`` and per-cell series."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": DOMAIN_FORMAT_VERSION, "config": domain.config.to_dict(),
            "noise_sigma": domain.noise_sigma, "attr_names": domain.attr_names,
            "param_names": [s.name for s in calibrated(domain.specs)], "transfer": domain.transfer}
    (d / "domain.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(d / "attributes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "row", "col"] + domain.attr_names)
        for j in range(domain.n_cells):
            r, c = domain.cell_rc(j)
            w.writerow([domain.cell_id(j), r, c] + [repr(float(v)) for v in domain.attributes[j]])
    names = [s.name for s in calibrated(domain.specs)]
    phys = domain.true_params
    with open(d / "truth_params.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + names)
        for j in range(domain.n_cells):
            w.writerow([domain.cell_id(j)] + [repr(float(v)) for v in phys[j]])
    if write_cells:
        cells = d / "cells"
        cells.mkdir(exist_ok=True)
        dates = domain.dates()
        obs_col = "q_mm" if domain.config.model_kind == "hbv" else "sm_frac"
        for j in range(domain.n_cells):
            cid = domain.cell_id(j)
            _write_series(cells / f"forcing_{cid}.csv", ("date",) + FORCING_COLUMNS, dates, domain.forcing[:, j])
            cols = [domain.obs[:, j]]
            header = ["date", obs_col]
            if domain.true_et is not None and domain.config.model_kind == "vic_lite":
                cols.append(domain.true_et[:, j])
                header.append("et_mm")
            _write_series(cells / f"obs_{cid}.csv", header, dates, np.stack(cols, axis=-1))


def load_domain(directory) -> GridDomain:
    """Regenerate a domain from its ``domain.json``."""
    p = Path(directory) / "domain.json"
    try:
        meta = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read {p}: {e}") from e
    if meta.get("format_version") != DOMAIN_FORMAT_VERSION:
        raise DataError(f"{p}: unsupported format version {meta.get('format_version')}")
    return build_domain(DomainConfig.from_dict(meta["config"]))
