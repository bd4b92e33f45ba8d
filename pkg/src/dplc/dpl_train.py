"""Differentiable parameter learning: train gA / gZ through HBV or the surrogate.

One training step: sample ``batch_sites`` training sites and a window, infer
raw parameters with the network, descale, simulate, take the domain-wide
RMSE over every unmasked ``(time, site)`` pair, back-propagate and apply an
Adam update.  The epoch ledger counts one forward simulation per site in the
batch, so ``epochs = cumulative_sims / n_training_sites``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import hbv
from .autodiff import NonFiniteError, Tape, Tensor, backward, stack
from .metrics import format_value, metric_table, write_metric_csv
from .nets import (Checkpoint, DropoutSpec, LstmParams, MlpParams, NetError, Standardizer, copy_net,
                   g_a, g_z, gz_input_dim, gz_inputs)
from .optim import Adam
from .params import ParamSpec, calibrated, descale, full_matrix

log = logging.getLogger(__name__)


class DplError(RuntimeError):
    pass


class EmptyMaskError(DplError, ValueError):
    pass


def rmse_loss(sim: Tensor, obs, mask=None, site_ids: Sequence | None = None) -> Tensor:
    """Domain-wide RMSE over all unmasked, finite-observation pairs.

    With ``site_ids`` the columns are reduced in sorted-id order, so the
    value and its gradient do not depend on the order of sites in a batch.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if sim.shape != obs.shape:
        raise DplError(f"sim shape {sim.shape} != obs shape {obs.shape}")
    ok = np.isfinite(obs)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    n = int(ok.sum())
    if n == 0:
        raise EmptyMaskError("loss mask selects no observations")
    if site_ids is not None:
        order = sorted(range(len(site_ids)), key=lambda j: site_ids[j])
        if order != list(range(len(site_ids))):
            sim = sim[:, order]
            obs, ok = obs[:, order], ok[:, order]
    target = np.where(ok, obs, 0.0)
    d = (sim - target) * ok.astype(np.float64)
    return ((d * d).sum() * (1.0 / n)).sqrt()


@dataclass(frozen=True)
class TrainConfig:
    network: str = "gA"                 # "gA" or "gZ"
    pbm: str = "hbv"                    # "hbv" or "surrogate"
    batch_sites: int = 16
    window_length: int | None = None    # None: 365 + spinup (hbv), 240 (surrogate)
    window_start: str = "random"        # "random" or "origin"
    learning_rate: float = 1e-3
    max_epochs: float = 100.0
    rmse_threshold: float = 0.05
    seed: int = 0
    spinup: int = 180
    patience: int | None = 20           # evaluation rounds without improvement
    eval_every: int = 1                 # optimizer steps between test-RMSE evaluations
    hidden: tuple = (64, 64)            # gA MLP hidden sizes
    gz_hidden: int = 64
    dropout: float = 0.5
    stop_at_threshold: bool = False
    eval_sites: int | None = None       # size of the validation subset (None: all training sites)
    clip_norm: float | None = None      # global gradient-norm clip

    def __post_init__(self):
        if self.network not in ("gA", "gZ"):
            raise DplError(f"network must be 'gA' or 'gZ', got {self.network!r}")
        if self.pbm not in ("hbv", "surrogate"):
            raise DplError(f"pbm must be 'hbv' or 'surrogate', got {self.pbm!r}")
        if self.window_start not in ("random", "origin"):
            raise DplError("window_start must be 'random' or 'origin'")
        if self.batch_sites < 1 or self.learning_rate <= 0 or self.max_epochs <= 0:
            raise DplError("batch_sites, learning_rate and max_epochs must be positive")
        if self.window_length is not None and self.window_length <= self.spinup:
            raise DplError("window_length must exceed spinup")

    def window(self) -> int:
        if self.window_length is not None:
            return self.window_length
        return 365 + self.spinup if self.pbm == "hbv" else 240

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class DplDataset:
    site_ids: list[str]
    attributes: np.ndarray            # (n, k)
    forcing: np.ndarray               # (T, n, 3)
    obs: np.ndarray                   # (T, n) NaN = missing
    train_slice: slice
    test_slice: slice
    specs: list[ParamSpec]            # full model parameter list
    training: list[int]               # positions of training sites
    surrogate: object | None = None

    def __post_init__(self):
        n = len(self.site_ids)
        if self.attributes.shape[0] != n or self.forcing.shape[1] != n or self.obs.shape[1] != n:
            raise DplError("dataset arrays disagree on the number of sites")
        if not self.training:
            raise DplError("no training sites")
        self.training = sorted(int(i) for i in self.training)

    @property
    def n_train_steps(self) -> int:
        """Steps from the series start to the end of the training record."""
        return self.train_slice.stop

    @classmethod
    def from_domain(cls, domain, train_cells: Sequence[int], extra_cells: Sequence[int] = (),
                    surrogate=None) -> "DplDataset":
        """Training cells first, then any extra (evaluation-only) cells."""
        cells = list(train_cells) + [c for c in extra_cells if c not in set(train_cells)]
        return cls([domain.cell_id(c) for c in cells], domain.attributes[cells], domain.forcing[:, cells],
                   domain.obs[:, cells], domain.train_slice, domain.test_slice, list(domain.specs),
                   list(range(len(train_cells))), surrogate)


@dataclass
class EpochLedger:
    n_sites: int
    cumulative_sims: int = 0
    rows: list[tuple[float, int, float]] = field(default_factory=list)   # (epoch, sims, test_rmse)

    @property
    def epochs(self) -> float:
        return self.cumulative_sims / self.n_sites

    def add_sims(self, k: int) -> None:
        self.cumulative_sims += int(k)

    def record(self, test_rmse: float) -> None:
        self.rows.append((self.epochs, self.cumulative_sims, float(test_rmse)))

    def epochs_to_threshold(self, threshold: float) -> float | None:
        for ep, _, r in self.rows:
            if r <= threshold:
                return ep
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "cumulative_sims", "test_rmse"])
            for ep, n, r in self.rows:
                w.writerow([repr(float(ep)), n, format_value(r)])


@dataclass
class DplModel:
    """A parameter network together with the statistics its inputs need."""
    kind: str                         # "gA" or "gZ"
    net: object
    specs: list[ParamSpec]
    attr_std: Standardizer
    forcing_std: Standardizer | None = None
    obs_std: Standardizer | None = None
    gz_window: int | None = None
    net_dropout: float = 0.0

    @property
    def cal_specs(self) -> list[ParamSpec]:
        return calibrated(self.specs)

    def raw_params(self, attributes, forcing=None, response=None, mode="eval", rng=None) -> Tensor:
        a = self.attr_std(attributes)
        if self.kind == "gA":
            return g_a(a, self.net, mode=mode, rng=rng)
        drop = DropoutSpec(self.net_dropout if mode == "train" else 0.0, mode)
        return g_z(a, self.forcing_std(forcing), self.obs_std(response), self.net, drop, rng=rng)

    def checkpoint(self, meta: dict | None = None) -> Checkpoint:
        std = {"attributes": self.attr_std}
        if self.forcing_std is not None:
            std["forcing"] = self.forcing_std
            std["obs"] = self.obs_std
        m = dict(meta or {}, network=self.kind, gz_window=self.gz_window, net_dropout=self.net_dropout)
        return Checkpoint(f"dpl-{self.kind}", self.net, list(self.specs), std, m)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "DplModel":
        st = ck.standardization
        return cls(ck.meta["network"], ck.net, ck.specs, st["attributes"], st.get("forcing"), st.get("obs"),
                   ck.meta.get("gz_window"), float(ck.meta.get("net_dropout", 0.0)))


def _build_model(ds: DplDataset, cfg: TrainConfig, rng) -> DplModel:
    tr = ds.training
    n_p = len(calibrated(ds.specs))
    attr_std = Standardizer.fit(ds.attributes[tr])
    seed = int(rng.integers(2 ** 31))
    if cfg.network == "gA":
        sizes = [ds.attributes.shape[1]] + list(cfg.hidden) + [n_p]
        net = MlpParams.init(sizes, seed=seed, dropout_rate=cfg.dropout)
        return DplModel("gA", net, list(ds.specs), attr_std)
    f_tr = ds.forcing[ds.train_slice][:, tr]
    o_tr = ds.obs[ds.train_slice][:, tr]
    forcing_std = Standardizer.fit(f_tr.reshape(-1, f_tr.shape[-1]))
    obs_std = Standardizer.fit(o_tr.reshape(-1))
    n_in = gz_input_dim(ds.forcing.shape[-1], 1, ds.attributes.shape[1])
    net = LstmParams.init(n_in, cfg.gz_hidden, n_p, seed=seed)
    return DplModel("gZ", net, list(ds.specs), attr_std, forcing_std, obs_std,
                    gz_window=min(cfg.window(), ds.n_train_steps), net_dropout=cfg.dropout)


def _full_params_tensor(phys: Tensor, specs: Sequence[ParamSpec]) -> Tensor:
    cols, j = [], 0
    n = phys.shape[0]
    for s in specs:
        if s.calibrated:
            cols.append(phys[:, j])
            j += 1
        else:
            cols.append(Tensor(np.full(n, s.fixed_value)))
    return stack(cols, axis=1)


def simulate_tensor(ds: DplDataset, raw: Tensor, forcing: np.ndarray, attributes: np.ndarray) -> Tensor:
    """Differentiable simulation of the observed variable, ``(T, B)``."""
    if ds.surrogate is None:
        phys = descale(raw, calibrated(ds.specs))
        return hbv.hbv_simulate_fused(forcing, _full_params_tensor(phys, ds.specs))
    sm, _ = ds.surrogate.predict(forcing, raw, attributes)
    return sm


def simulate_numpy(ds: DplDataset, raw: np.ndarray, forcing: np.ndarray, attributes: np.ndarray) -> np.ndarray:
    if ds.surrogate is None:
        full = full_matrix(descale(raw, calibrated(ds.specs)), ds.specs)
        return hbv.hbv_run(forcing, full)
    sm, _ = ds.surrogate.predict_numpy(forcing, raw, attributes)
    return sm


def gz_window_for_eval(ds: DplDataset, length: int) -> slice:
    """Final ``length`` steps up to the end of the training record; never reaches the test period."""
    stop = ds.train_slice.stop
    return slice(max(0, stop - length), stop)


def infer_raw(model: DplModel, ds: DplDataset, sites: Sequence[int]) -> np.ndarray:
    """Raw parameters for ``sites`` in eval mode (gZ reads training-period inputs only)."""
    sites = list(sites)
    attrs = ds.attributes[sites]
    if model.kind == "gA":
        return model.raw_params(attrs).data
    win = gz_window_for_eval(ds, model.gz_window or ds.n_train_steps)
    assert win.stop <= ds.train_slice.stop, "gZ inputs must come from the training period"
    return model.raw_params(attrs, ds.forcing[win][:, sites], ds.obs[win][:, sites]).data


def test_rmse(model: DplModel, ds: DplDataset, sites: Sequence[int]) -> float:
    raw = infer_raw(model, ds, sites)
    sim = simulate_numpy(ds, raw, ds.forcing[:, list(sites)], ds.attributes[list(sites)])
    obs = ds.obs[ds.test_slice][:, list(sites)]
    d = sim[ds.test_slice] - obs
    ok = np.isfinite(d)
    return float(np.sqrt(np.mean(d[ok] ** 2)))


@dataclass
class TrainResult:
    model: DplModel                  # best test-RMSE network
    final_model: DplModel
    ledger: EpochLedger
    train_loss: list[float]
    status: str                      # "max_epochs", "early_stop", "threshold", "aborted_nan"
    best_test_rmse: float
    steps: int
    seconds: float
    notes: list[str] = field(default_factory=list)


def _snapshot(net):
    return [t.data.copy() for t in net.tensors()]


def _restore(net, snap):
    for t, d in zip(net.tensors(), snap):
        t.data = d.copy()


def _clip(grads, tensors, max_norm: float) -> float:
    gs = [grads.get(t) for t in tensors]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in gs if g is not None)))
    if norm > max_norm:
        for t, g in zip(tensors, gs):
            if g is not None:
                grads[t.node_id] = g * (max_norm / norm)
    return norm


def train_dpl(ds: DplDataset, config: TrainConfig = TrainConfig()) -> TrainResult:
    t0 = time.perf_counter()
    cfg = config
    if cfg.pbm == "surrogate" and ds.surrogate is None:
        raise DplError("surrogate path needs a surrogate on the dataset")
    if cfg.pbm == "hbv" and ds.surrogate is not None:
        raise DplError("hbv path given a dataset with a surrogate")
    tr = ds.training
    n_sites = len(tr)
    if cfg.batch_sites > n_sites:
        raise DplError(f"batch_sites {cfg.batch_sites} exceeds {n_sites} training sites")
    n_avail = ds.train_slice.stop      # simulations may start anywhere in [0, train end)
    window = n_avail if cfg.window_start == "origin" else min(cfg.window(), n_avail)
    if window <= cfg.spinup:
        raise DplError("training period shorter than spinup")
    rng = np.random.default_rng(cfg.seed)
    model = _build_model(ds, cfg, rng)
    opt = Adam(model.net.tensors(), lr=cfg.learning_rate)
    surrogate = ds.surrogate.frozen() if ds.surrogate is not None else None
    run_ds = dataclasses.replace(ds, surrogate=surrogate) if surrogate is not None else ds
    eval_sites = tr
    if cfg.eval_sites is not None and cfg.eval_sites < n_sites:
        eval_sites = sorted(rng.choice(tr, size=cfg.eval_sites, replace=False).tolist())

    ledger = EpochLedger(n_sites)
    losses: list[float] = []
    best_rmse = np.inf
    best_snap = _snapshot(model.net)
    last_snap = best_snap
    since_best = 0
    nan_strikes = 0
    status = "max_epochs"
    notes = []
    steps = 0
    mode = "train"
    max_sims = cfg.max_epochs * n_sites

    while ledger.cumulative_sims + cfg.batch_sites <= max_sims + 1e-9:
        batch = np.sort(rng.choice(tr, size=cfg.batch_sites, replace=False))
        w0 = 0 if window == n_avail else int(rng.integers(0, n_avail - window + 1))
        win = slice(w0, w0 + window)
        forcing = ds.forcing[win][:, batch]
        obs = ds.obs[win][:, batch]
        attrs = ds.attributes[batch]
        failed = False
        try:
            with Tape() as tape:
                if model.kind == "gA":
                    raw = model.raw_params(attrs, mode=mode, rng=rng)
                else:
                    raw = model.raw_params(attrs, forcing, obs, mode=mode, rng=rng)
                sim = simulate_tensor(run_ds, raw, forcing, attrs)
                loss = rmse_loss(sim[cfg.spinup:], obs[cfg.spinup:], site_ids=[ds.site_ids[b] for b in batch])
            if not np.isfinite(loss.data).all():
                raise NonFiniteError("non-finite loss")
            grads = backward(tape, loss)
        except (NonFiniteError, FloatingPointError, NetError, hbv.HbvError) as e:
            failed = True
            err = e
        ledger.add_sims(cfg.batch_sites)
        steps += 1
        if failed:
            nan_strikes += 1
            _restore(model.net, last_snap)
            if nan_strikes > 1:
                status = "aborted_nan"
                notes.append(f"step {steps}: {err}; aborted after second failure")
                break
            opt.lr *= 0.5
            notes.append(f"step {steps}: {err}; learning rate halved to {opt.lr}")
            continue
        losses.append(float(loss.data))
        last_snap = _snapshot(model.net)
        if cfg.clip_norm is not None:
            _clip(grads, model.net.tensors(), cfg.clip_norm)
        opt.step(grads)
        if steps % cfg.eval_every == 0:
            r = test_rmse(model, run_ds, eval_sites)
            ledger.record(r)
            if r < best_rmse:
                best_rmse, best_snap, since_best = r, _snapshot(model.net), 0
            else:
                since_best += 1
            if cfg.stop_at_threshold and r <= cfg.rmse_threshold:
                status = "threshold"
                break
            if cfg.patience is not None and since_best >= cfg.patience:
                status = "early_stop"
                break

    final = dataclasses.replace(model, net=copy_net(model.net))
    best = dataclasses.replace(model, net=copy_net(model.net))
    _restore(best.net, best_snap)
    return TrainResult(best, final, ledger, losses, status, float(best_rmse), steps,
                       time.perf_counter() - t0, notes)


def evaluate_dpl(model: DplModel, ds: DplDataset, protocol: str = "temporal",
                 pairs: Sequence[tuple[int, int]] | None = None, period: str = "test") -> list[dict]:
    """Per-site metric rows.

    ``temporal``: the training sites, parameters from their own inputs.
    ``spatial_neighbor``: ``pairs`` of ``(train_pos, neighbor_pos)`` dataset
    positions; parameters come from the neighbour's own attributes (and, for
    gZ, its training-period series) and the neighbour is scored.
    """
    if protocol == "temporal":
        sites = list(ds.training)
    elif protocol == "spatial_neighbor":
        if pairs is None:
            raise DplError("spatial_neighbor protocol needs neighbour pairs")
        train = set(ds.training)
        sites = []
        for _, nb in pairs:
            if nb in train:
                log.warning("neighbour %s is a training site, skipped", ds.site_ids[nb])
                continue
            sites.append(nb)
    else:
        raise DplError(f"unknown protocol {protocol!r}")
    if not sites:
        return []
    raw = infer_raw(model, ds, sites)
    sim = simulate_numpy(ds, raw, ds.forcing[:, sites], ds.attributes[sites])
    sl = ds.test_slice if period == "test" else ds.train_slice
    return metric_table(sim[sl], ds.obs[sl][:, sites], [ds.site_ids[s] for s in sites])


def write_run_dir(directory, config: TrainConfig, result: TrainResult, metrics: dict[str, list[dict]]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    result.ledger.write_csv(d / "ledger.csv")
    result.model.checkpoint({"status": result.status}).save(d / "best.ckpt.json")
    for protocol, rows in metrics.items():
        write_metric_csv(d / f"metrics_{protocol}.csv", rows)
