"""LSTM emulator of the VIC-lite column (soil moisture and ET).

Per step the network sees ``[forcing_t | raw params | attributes]``, with the
parameters given as their (0, 1) preimages so that a parameter network's
sigmoid output feeds straight in.  Both targets are predicted in
standardized units; the loss is the joint MSE over the two standardized
variables after a warm-up of ``warmup`` steps.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import vic_lite
from .autodiff import Tape, Tensor, backward, concat
from .metrics import corr, median_metric, ubrmse, MetricUndefined
from .nets import Checkpoint, LstmParams, Standardizer, lstm_forward, lstm_predict
from .optim import Adam
from .params import ParamSpec, descale

log = logging.getLogger(__name__)

TARGETS = ("sm", "et")


class SurrogateError(RuntimeError):
    pass


@dataclass
class SurrogateDataset:
    cell_ids: list[str]
    forcing: np.ndarray        # (T, n_cells, 3)
    attributes: np.ndarray     # (n_cells, k)
    raw: np.ndarray            # (n_cells, D, 5) in [0, 1]
    sm: np.ndarray             # (T, n_cells, D)
    et: np.ndarray             # (T, n_cells, D)
    specs: list[ParamSpec]

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def n_draws(self) -> int:
        return self.raw.shape[1]

    @property
    def n_sequences(self) -> int:
        return self.n_cells * self.n_draws

    @property
    def params(self) -> np.ndarray:
        return descale(self.raw, self.specs)


def stratified_uniform(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, k)`` draws, each column with exactly one point in each of ``n`` equal strata."""
    u = np.empty((n, k))
    for j in range(k):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return u


def build_surrogate_dataset(cells: Sequence, n_param_draws: int, seed: int,
                            specs: Sequence[ParamSpec] | None = None,
                            structure: vic_lite.VicStructure = vic_lite.DEFAULT_STRUCTURE) -> SurrogateDataset:
    """Simulate every ``(cell, parameter draw)`` pair with VIC-lite.

    ``cells`` is a sequence of ``(cell_id, forcing (T, 3), attributes (k,))``.
    Parameter draws are stratified uniform across all ``n_cells * n_param_draws``
    sequences, independently per parameter.
    """
    if n_param_draws < 1:
        raise SurrogateError("n_param_draws must be >= 1")
    if not cells:
        raise SurrogateError("no cells given")
    specs = list(specs or vic_lite.vic_specs())
    ids = [str(c[0]) for c in cells]
    forcing = np.stack([np.asarray(c[1], dtype=np.float64) for c in cells], axis=1)
    attrs = np.stack([np.asarray(c[2], dtype=np.float64).reshape(-1) for c in cells])
    n, d = len(ids), n_param_draws
    rng = np.random.default_rng(seed)
    raw = stratified_uniform(n * d, len(specs), rng).reshape(n, d, len(specs))
    phys = descale(raw, specs)
    n_t = forcing.shape[0]
    sm = np.empty((n_t, n, d))
    et = np.empty((n_t, n, d))
    for j, cid in enumerate(ids):
        try:
            out = vic_lite.vic_lite_simulate(forcing[:, j], phys[j], structure=structure)
        except Exception as e:
            raise SurrogateError(f"cell {cid}: simulation failed: {e}") from e
        if not (np.isfinite(out["sm"]).all() and np.isfinite(out["et"]).all()):
            raise SurrogateError(f"cell {cid}: non-finite simulation output")
        sm[:, j], et[:, j] = out["sm"], out["et"]
    return SurrogateDataset(ids, forcing, attrs, raw, sm, et, specs)


@dataclass
class Surrogate:
    net: LstmParams
    specs: list[ParamSpec]
    forcing_std: Standardizer
    attr_std: Standardizer | None
    target_std: Standardizer            # over (sm, et)
    warmup: int = 60

    @property
    def uses_attributes(self) -> bool:
        return self.attr_std is not None

    def frozen(self) -> "Surrogate":
        """Copy whose weights are constants (gradients flow to the inputs only)."""
        net = LstmParams(self.net.input_dim, self.net.hidden_dim, self.net.output_dim,
                         {k: Tensor(v.data, requires_grad=False) for k, v in self.net.weights.items()})
        return Surrogate(net, self.specs, self.forcing_std, self.attr_std, self.target_std, self.warmup)

    def _static(self, raw, attributes):
        if not self.uses_attributes:
            return raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw, dtype=np.float64))
        a = Tensor(self.attr_std(attributes))
        return concat([raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw, dtype=np.float64)), a], axis=1)

    def predict_std(self, forcing, raw, attributes=None) -> Tensor:
        """Standardized ``(T, B, 2)`` outputs (differentiable in ``raw``)."""
        x = self.forcing_std(forcing)
        y, _, _ = lstm_forward(self.net, x, static=self._static(raw, attributes))
        return y

    def predict(self, forcing, raw, attributes=None):
        """Physical ``(sm, et)`` Tensors of shape ``(T, B)``."""
        y = self.predict_std(forcing, raw, attributes)
        m, s = self.target_std.mean, self.target_std.std
        sm = y[:, :, 0] * float(s[0]) + float(m[0])
        et = y[:, :, 1] * float(s[1]) + float(m[1])
        return sm, et

    def predict_numpy(self, forcing, raw, attributes=None, chunk: int = 512):
        """Plain-array prediction in column chunks (no tape); returns ``(sm, et)`` ``(T, B)``."""
        forcing = np.asarray(forcing, dtype=np.float64)
        raw = np.asarray(raw, dtype=np.float64)
        n_b = raw.shape[0]
        sm = np.empty((forcing.shape[0], n_b))
        et = np.empty_like(sm)
        m, s = self.target_std.mean, self.target_std.std
        for a in range(0, n_b, chunk):
            b = min(a + chunk, n_b)
            static = raw[a:b]
            if self.uses_attributes:
                static = np.concatenate([static, self.attr_std(np.asarray(attributes)[a:b])], axis=1)
            y = lstm_predict(self.net, self.forcing_std(forcing[:, a:b]), static)
            sm[:, a:b] = y[:, :, 0] * float(s[0]) + float(m[0])
            et[:, a:b] = y[:, :, 1] * float(s[1]) + float(m[1])
        return sm, et

    def checkpoint(self, meta: dict | None = None) -> Checkpoint:
        std = {"forcing": self.forcing_std, "target": self.target_std}
        if self.attr_std is not None:
            std["attributes"] = self.attr_std
        return Checkpoint("surrogate", self.net, list(self.specs), std, dict(meta or {}, warmup=self.warmup))

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "Surrogate":
        if ck.kind != "surrogate":
            raise SurrogateError(f"checkpoint kind is {ck.kind!r}, expected 'surrogate'")
        st = ck.standardization
        return cls(ck.net, ck.specs, st["forcing"], st.get("attributes"), st["target"],
                   int(ck.meta.get("warmup", 60)))

    def save(self, path, meta: dict | None = None) -> None:
        self.checkpoint(meta).save(path)

    @classmethod
    def load(cls, path) -> "Surrogate":
        return cls.from_checkpoint(Checkpoint.load(path))


@dataclass(frozen=True)
class SurrogateConfig:
    hidden_dim: int = 64
    epochs: int = 30
    batch_size: int = 64
    window: int = 240
    warmup: int = 60
    learning_rate: float = 3e-3
    lr_decay: float = 1.0          # multiplicative per epoch
    held_out_frac: float = 0.2
    use_attributes: bool = True
    seed: int = 0
    max_seconds: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FidelityReport:
    variables: dict                  # var -> {median_corr, median_ubrmse, n_sequences, n_undefined}
    zero_variance_targets: list[str]
    history: list[float]
    initial_loss: float
    final_loss: float
    aborted: bool
    held_out_cells: list[str]
    seconds: float
    notes: list[str] = field(default_factory=list)

    def median_corr(self, var: str):
        return self.variables[var]["median_corr"]

    def to_dict(self) -> dict:
        return asdict(self)


def _split(n: int, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    if n < 2 or frac <= 0:
        idx = np.arange(n)
        return idx, idx[:0]
    n_held = max(1, int(round(frac * n)))
    perm = rng.permutation(n)
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def _snapshot(net: LstmParams) -> dict:
    return {k: v.data.copy() for k, v in net.weights.items()}


def _restore(net: LstmParams, snap: dict) -> None:
    for k, v in snap.items():
        net.weights[k].data = v.copy()


def _batch_loss(model: Surrogate, ds: SurrogateDataset, cells, draws, starts, window, warmup, targets_std):
    t_idx = starts[None, :] + np.arange(window)[:, None]          # (W, B)
    forcing = ds.forcing[t_idx, cells[None, :]]                     # (W, B, 3)
    raw = ds.raw[cells, draws]
    attrs = ds.attributes[cells] if model.uses_attributes else None
    y = model.predict_std(forcing, raw, attrs)
    tgt = np.stack([ds.sm[t_idx, cells[None, :], draws[None, :]],
                    ds.et[t_idx, cells[None, :], draws[None, :]]], axis=-1)
    tgt = targets_std(tgt)
    d = y[warmup:] - tgt[warmup:]
    return (d * d).mean()


def fidelity(model: Surrogate, ds: SurrogateDataset, cells: Sequence[int]) -> tuple[dict, list[str]]:
    """Per-sequence correlation and ubRMSE against VIC-lite over full series after warm-up."""
    cells = np.asarray(cells, dtype=int)
    d = ds.n_draws
    cc = np.repeat(cells, d)
    dd = np.tile(np.arange(d), cells.size)
    sm, et = model.predict_numpy(ds.forcing[:, cc], ds.raw[cc, dd],
                                 ds.attributes[cc] if model.uses_attributes else None)
    pred = {"sm": sm, "et": et}
    truth = {"sm": ds.sm[:, cc, dd], "et": ds.et[:, cc, dd]}
    w = model.warmup
    out, zero_var = {}, []
    for var in TARGETS:
        rows = []
        for j in range(cc.size):
            row = {}
            for name, fn in (("corr", corr), ("ubrmse", ubrmse)):
                try:
                    row[name] = fn(pred[var][w:, j], truth[var][w:, j])
                except MetricUndefined:
                    row[name] = None
            rows.append(row)
        mc, n_undef = median_metric(rows, "corr")
        mu, _ = median_metric(rows, "ubrmse")
        if mc is None:
            zero_var.append(var)
        out[var] = {"median_corr": mc, "median_ubrmse": mu, "n_sequences": int(cc.size),
                    "n_undefined": int(n_undef)}
    return out, zero_var


def train_surrogate(dataset: SurrogateDataset, config: SurrogateConfig = SurrogateConfig(),
                    epochs: int | None = None) -> tuple[Surrogate, FidelityReport]:
    """Fit the emulator on the training cells and audit it on held-out cells."""
    t0 = time.perf_counter()
    ds = dataset
    epochs = config.epochs if epochs is None else epochs
    n_t = ds.forcing.shape[0]
    window = min(config.window, n_t)
    if window <= config.warmup:
        raise SurrogateError("window must exceed warmup")
    rng = np.random.default_rng(config.seed)
    train_cells, held_cells = _split(ds.n_cells, config.held_out_frac, rng)

    f_std = Standardizer.fit(ds.forcing[:, train_cells].reshape(-1, ds.forcing.shape[-1]))
    a_std = None
    if config.use_attributes and ds.attributes.shape[1] > 0:
        a_std = Standardizer.fit(ds.attributes[train_cells])
    tgt = np.stack([ds.sm[:, train_cells].ravel(), ds.et[:, train_cells].ravel()], axis=-1)
    t_std = Standardizer.fit(tgt)
    zero_var = [v for v, s in zip(TARGETS, np.ptp(tgt, axis=0)) if s == 0.0]
    notes = []
    if zero_var:
        notes.append(f"zero-variance training targets: {zero_var}")

    n_static = len(ds.specs) + (ds.attributes.shape[1] if a_std is not None else 0)
    net = LstmParams.init(ds.forcing.shape[-1] + n_static, config.hidden_dim, 2, seed=config.seed)
    model = Surrogate(net, list(ds.specs), f_std, a_std, t_std, config.warmup)
    opt = Adam(net.tensors(), lr=config.learning_rate)

    seqs = np.array([(c, k) for c in train_cells for k in range(ds.n_draws)], dtype=int)
    probe = seqs[np.sort(rng.choice(len(seqs), size=min(len(seqs), 128), replace=False))]
    probe_starts = rng.integers(0, n_t - window + 1, size=len(probe))

    def probe_loss():
        return float(_batch_loss(model, ds, probe[:, 0], probe[:, 1], probe_starts, window,
                                 config.warmup, t_std).data)

    initial = probe_loss()
    history = []
    snap = _snapshot(net)
    aborted = False
    for ep in range(epochs):
        order = rng.permutation(len(seqs))
        losses = []
        for a in range(0, len(order), config.batch_size):
            sel = seqs[np.sort(order[a:a + config.batch_size])]
            starts = rng.integers(0, n_t - window + 1, size=len(sel))
            with Tape() as tape:
                loss = _batch_loss(model, ds, sel[:, 0], sel[:, 1], starts, window, config.warmup, t_std)
            if not np.isfinite(loss.data).all():
                aborted = True
                break
            try:
                grads = backward(tape, loss)
            except FloatingPointError:
                aborted = True
                break
            opt.step(grads)
            losses.append(float(loss.data))
        if aborted or not all(np.isfinite(v.data).all() for v in net.weights.values()):
            aborted = True
            _restore(net, snap)
            notes.append(f"divergent loss in epoch {ep}; restored last finite weights")
            log.warning("surrogate training diverged in epoch %d; restored last finite checkpoint", ep)
            break
        snap = _snapshot(net)
        history.append(float(np.mean(losses)) if losses else float("nan"))
        opt.lr *= config.lr_decay
        if config.max_seconds is not None and time.perf_counter() - t0 > config.max_seconds:
            notes.append(f"stopped after epoch {ep} on the time limit")
            break
    final = probe_loss()
    eval_cells = held_cells if held_cells.size else train_cells
    variables, zv = fidelity(model, ds, eval_cells)
    for v in zv:
        if v not in zero_var:
            zero_var.append(v)
    report = FidelityReport(variables, zero_var, history, initial, final, aborted,
                            [ds.cell_ids[i] for i in held_cells], time.perf_counter() - t0, notes)
    return model, report
