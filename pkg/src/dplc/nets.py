"""Neural components: the gated LSTM, an MLP, and the parameter-estimation heads.

The LSTM follows the standard single-layer form with an input
transformation and dropout on the gate matrix-vector products::

    x_t = relu(W_I I_t + b_I)
    g_t = tanh(D(W_gx x_t) + D(W_gh h_{t-1}) + b_g)
    i_t = sigmoid(D(W_ix x_t) + D(W_ih h_{t-1}) + b_i)     (f_t, o_t alike)
    s_t = g_t * i_t + s_{t-1} * f_t
    h_t = tanh(s_t) * o_t
    y_t = W_hy h_t + b_y

``D`` masks are drawn once per sequence and reused at every step.  Row-vector
convention throughout: weights have shape ``(n_in, n_out)`` and inputs are
``(time, batch, features)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .autodiff import Tensor, apply, concat, stack
from .params import ParamSpec, descale

CHECKPOINT_FORMAT = "dplc-checkpoint"
CHECKPOINT_VERSION = 1

LSTM_WEIGHTS = ("W_I", "b_I", "W_gx", "W_gh", "b_g", "W_ix", "W_ih", "b_i",
                "W_fx", "W_fh", "b_f", "W_ox", "W_oh", "b_o", "W_hy", "b_y")


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0
    mode: str = "eval"  # "train" or "eval"
    mask_scope: str = "per-sequence"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise NetError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise NetError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def active(self) -> bool:
        return self.mode == "train" and self.rate > 0.0

    def mask(self, shape, rng: np.random.Generator) -> np.ndarray | None:
        if not self.active:
            return None
        keep = 1.0 - self.rate
        return (rng.random(shape) < keep) / keep


EVAL = DropoutSpec(0.0, "eval")


def _init_uniform(rng, shape, scale):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


@dataclass
class LstmParams:
    input_dim: int
    hidden_dim: int
    output_dim: int
    weights: dict[str, Tensor]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, output_dim: int, seed=0,
             forget_bias: float = 1.0) -> "LstmParams":
        rng = np.random.default_rng(seed)
        h = hidden_dim
        k = 1.0 / np.sqrt(h)
        w = {"W_I": _init_uniform(rng, (input_dim, h), 1.0 / np.sqrt(input_dim)),
             "b_I": _init_uniform(rng, (h,), 1.0 / np.sqrt(input_dim))}
        for gate in "gifo":
            w[f"W_{gate}x"] = _init_uniform(rng, (h, h), k)
            w[f"W_{gate}h"] = _init_uniform(rng, (h, h), k)
            w[f"b_{gate}"] = _init_uniform(rng, (h,), k)
        w["b_f"] = Tensor(w["b_f"].data + forget_bias, requires_grad=True)
        w["W_hy"] = _init_uniform(rng, (h, output_dim), k)
        w["b_y"] = Tensor(np.zeros(output_dim), requires_grad=True)
        return cls(input_dim, hidden_dim, output_dim, {n: w[n] for n in LSTM_WEIGHTS})

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, output_dim: int) -> "LstmParams":
        p = cls.init(input_dim, hidden_dim, output_dim)
        for t in p.weights.values():
            t.data = np.zeros_like(t.data)
        return p

    def tensors(self) -> list[Tensor]:
        return [self.weights[n] for n in LSTM_WEIGHTS]

    def validate(self):
        h = self.hidden_dim
        for g in "gifo":
            for kind in "xh":
                if self.weights[f"W_{g}{kind}"].shape != (h, h):
                    raise NetError(f"W_{g}{kind} must be {h}x{h}")
        if self.weights["W_I"].shape != (self.input_dim, h):
            raise NetError("W_I has wrong shape")
        if self.weights["W_hy"].shape != (h, self.output_dim):
            raise NetError("W_hy has wrong shape")
        for n, t in self.weights.items():
            if not t.is_finite():
                raise NetError(f"non-finite entries in {n}")

    def arch(self) -> dict:
        return {"type": "lstm", "input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "output_dim": self.output_dim}


@dataclass
class LstmTrace:
    """Dropout masks used by the last forward call (for inspection in tests)."""
    mask_x: np.ndarray | None = None
    mask_h: np.ndarray | None = None


def _as_sequence_tensor(inputs):
    if isinstance(inputs, Tensor):
        return inputs
    if isinstance(inputs, (list, tuple)):
        if inputs and isinstance(inputs[0], Tensor) and any(x.requires_grad for x in inputs):
            return stack(list(inputs), axis=0)
        return Tensor(np.stack([x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
                                for x in inputs], axis=0))
    return Tensor(np.asarray(inputs, dtype=np.float64))


def lstm_forward(params: LstmParams, inputs, dropout: DropoutSpec = EVAL,
                 rng: np.random.Generator | None = None, static=None,
                 trace: LstmTrace | None = None, return_sequence: bool = True):
    """Run the LSTM over ``inputs`` ``(T, B, n_dyn)`` starting from zero states.

    ``static`` (``(B, n_static)``) is appended to every step's input vector;
    it is equivalent to replicating it along time but computed once.
    Returns ``(y, h_T, s_T)`` where ``y`` is ``(T, B, output_dim)`` (or just
    the last step ``(B, output_dim)`` when ``return_sequence`` is false).
    """
    seq = _as_sequence_tensor(inputs)
    if seq.ndim != 3:
        raise NetError(f"inputs must be (time, batch, features), got shape {seq.shape}")
    n_t, n_b, n_dyn = seq.shape
    n_static = 0 if static is None else static.shape[-1]
    if n_dyn + n_static != params.input_dim:
        raise NetError(f"input dim {n_dyn}+{n_static} != network input_dim {params.input_dim}")
    w = params.weights
    hd = params.hidden_dim
    rng = rng if rng is not None else np.random.default_rng()

    w_i = w["W_I"]
    if n_static:
        static = static if isinstance(static, Tensor) else Tensor(static)
        pre = seq @ w_i[:n_dyn] + (static @ w_i[n_dyn:] + w["b_I"])
    else:
        pre = seq @ w_i + w["b_I"]
    x = apply("relu", pre)

    wx = concat([w["W_gx"], w["W_ix"], w["W_fx"], w["W_ox"]], axis=1)
    wh = concat([w["W_gh"], w["W_ih"], w["W_fh"], w["W_oh"]], axis=1)
    b = concat([w["b_g"], w["b_i"], w["b_f"], w["b_o"]], axis=0)
    mask_x = dropout.mask((n_b, 4 * hd), rng)
    mask_h = dropout.mask((n_b, 4 * hd), rng)
    if trace is not None:
        trace.mask_x, trace.mask_h = mask_x, mask_h
    xw = x @ wx
    if mask_x is not None:
        xw = xw * mask_x
    xw = xw + b

    h = Tensor(np.zeros((n_b, hd)))
    s = Tensor(np.zeros((n_b, hd)))
    hs = []
    for t in range(n_t):
        hw = h @ wh
        if mask_h is not None:
            hw = hw * mask_h
        z = apply("slice", xw, index=t) + hw
        g = apply("tanh", apply("slice", z, index=(slice(None), slice(0, hd))))
        ifo = apply("sigmoid", apply("slice", z, index=(slice(None), slice(hd, None))))
        i = apply("slice", ifo, index=(slice(None), slice(0, hd)))
        f = apply("slice", ifo, index=(slice(None), slice(hd, 2 * hd)))
        o = apply("slice", ifo, index=(slice(None), slice(2 * hd, None)))
        s = g * i + s * f
        h = apply("tanh", s) * o
        if not np.isfinite(s.data).all():
            raise NetError(f"non-finite LSTM state at time index {t}")
        if return_sequence:
            hs.append(h)
    if return_sequence:
        y = stack(hs, axis=0) @ w["W_hy"] + w["b_y"]
    else:
        y = h @ w["W_hy"] + w["b_y"]
    return y, h, s


def lstm_predict(params: LstmParams, inputs, static=None) -> np.ndarray:
    """Eval-mode forward pass on plain arrays, ``(T, B, output_dim)``.

    Same arithmetic as :func:`lstm_forward` without recording a tape and
    without materializing the ``(T, B, 4H)`` gate inputs, for large batches.
    """
    seq = np.asarray(inputs, dtype=np.float64)
    n_t, n_b, n_dyn = seq.shape
    n_static = 0 if static is None else np.shape(static)[-1]
    if n_dyn + n_static != params.input_dim:
        raise NetError(f"input dim {n_dyn}+{n_static} != network input_dim {params.input_dim}")
    w = {k: v.data for k, v in params.weights.items()}
    hd = params.hidden_dim
    base = w["b_I"] + (np.asarray(static, dtype=np.float64) @ w["W_I"][n_dyn:] if n_static else 0.0)
    w_dyn = w["W_I"][:n_dyn]
    wx = np.concatenate([w["W_gx"], w["W_ix"], w["W_fx"], w["W_ox"]], axis=1)
    wh = np.concatenate([w["W_gh"], w["W_ih"], w["W_fh"], w["W_oh"]], axis=1)
    b = np.concatenate([w["b_g"], w["b_i"], w["b_f"], w["b_o"]])
    h = np.zeros((n_b, hd))
    s = np.zeros((n_b, hd))
    y = np.empty((n_t, n_b, w["W_hy"].shape[1]))
    for t in range(n_t):
        x = np.maximum(seq[t] @ w_dyn + base, 0.0)
        z = x @ wx + b + h @ wh
        g = np.tanh(z[:, :hd])
        ifo = expit(z[:, hd:])
        s = g * ifo[:, :hd] + s * ifo[:, hd:2 * hd]
        h = np.tanh(s) * ifo[:, 2 * hd:]
        y[t] = h @ w["W_hy"] + w["b_y"]
    if not np.isfinite(s).all():
        raise NetError("non-finite LSTM state")
    return y


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]
    dropout_rate: float = 0.0

    @classmethod
    def init(cls, sizes: Sequence[int], seed=0, hidden_activation="relu",
             final_activation="sigmoid", dropout_rate: float = 0.0) -> "MlpParams":
        rng = np.random.default_rng(seed)
        ws, bs, acts = [], [], []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(6.0 / (a + b))
            ws.append(_init_uniform(rng, (a, b), scale))
            bs.append(Tensor(np.zeros(b), requires_grad=True))
            acts.append(final_activation if k == len(sizes) - 2 else hidden_activation)
        return cls(ws, bs, acts, dropout_rate)

    def validate(self):
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise NetError("MLP layer dimensions do not chain")

    def tensors(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arch(self) -> dict:
        return {"type": "mlp", "sizes": self.sizes, "activations": self.activations,
                "dropout_rate": self.dropout_rate}


_ACT = {"relu": "relu", "sigmoid": "sigmoid", "tanh": "tanh"}


def mlp_forward(params: MlpParams, x, mode: str = "eval", rng=None):
    h = x if isinstance(x, Tensor) else Tensor(x)
    rng = rng if rng is not None else np.random.default_rng()
    last = len(params.weights) - 1
    for k, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        h = h @ w + b
        if act != "linear":
            h = apply(_ACT[act], h)
        if k < last and mode == "train" and params.dropout_rate > 0.0:
            keep = 1.0 - params.dropout_rate
            h = h * ((rng.random(h.shape) < keep) / keep)
    return h


# ---------------------------------------------------------------------------
# standardization + parameter heads


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, axis=0) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        mean = np.nanmean(x, axis=axis)
        std = np.nanstd(x, axis=axis)
        std = np.where(std > 0.0, std, 1.0)
        return cls(np.asarray(mean), np.asarray(std))

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def g_a(attributes, net, mode: str = "eval", rng=None) -> Tensor:
    """Attribute-only parameter network; returns raw parameters in (0, 1).

    ``attributes`` must already be standardized with training statistics.
    """
    a = attributes.data if isinstance(attributes, Tensor) else np.asarray(attributes, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NetError("attributes contain NaN/Inf; impute upstream")
    if isinstance(net, MlpParams):
        if net.activations[-1] != "sigmoid":
            raise NetError("parameter heads need a final sigmoid")
        return mlp_forward(net, a, mode=mode, rng=rng)
    if isinstance(net, LstmParams):
        drop = DropoutSpec(0.0, "eval")
        y, _, _ = lstm_forward(net, a[None, :, :], drop, rng=rng, return_sequence=False)
        return apply("sigmoid", y)
    raise NetError(f"unsupported network type {type(net).__name__}")


MIN_SERIES_LENGTH = 30


def gz_inputs(attributes, forcing, response) -> np.ndarray:
    """Per-step input ``[forcing_t | response_t | missing_flag_t | attributes]``.

    ``forcing`` ``(T, B, n_f)``, ``response`` ``(T, B)`` or ``(T, B, n_r)``
    (NaN = missing), ``attributes`` ``(B, n_a)``.  Missing responses are set
    to 0 with flag 1.
    """
    forcing = np.asarray(forcing, dtype=np.float64)
    resp = np.asarray(response, dtype=np.float64)
    if resp.ndim == 2:
        resp = resp[:, :, None]
    missing = ~np.isfinite(resp)
    resp = np.where(missing, 0.0, resp)
    n_t, n_b = forcing.shape[:2]
    attrs = np.broadcast_to(np.asarray(attributes, dtype=np.float64)[None], (n_t, n_b, attributes.shape[-1]))
    return np.concatenate([forcing, resp, missing.astype(np.float64), attrs], axis=-1)


def g_z(attributes, forcing, response, net: LstmParams, dropout: DropoutSpec = EVAL,
        rng=None, min_length: int = MIN_SERIES_LENGTH) -> Tensor:
    """Time-series parameter network: sigmoid of the LSTM output at the final step."""
    attributes = np.asarray(attributes, dtype=np.float64)
    if not np.isfinite(attributes).all():
        raise NetError("attributes contain NaN/Inf; impute upstream")
    forcing = np.asarray(forcing, dtype=np.float64)
    if forcing.shape[0] < min_length:
        raise NetError(f"series length {forcing.shape[0]} shorter than minimum {min_length}")
    seq = gz_inputs(attributes, forcing, response)
    y, _, _ = lstm_forward(net, seq, dropout, rng=rng, return_sequence=False)
    return apply("sigmoid", y)


def gz_input_dim(n_forcing: int, n_response: int, n_attr: int) -> int:
    return n_forcing + 2 * n_response + n_attr


# ---------------------------------------------------------------------------
# checkpoints


def _pack(t: Tensor) -> dict:
    return {"shape": list(t.shape), "data": t.data.ravel().tolist()}


def _unpack(d: dict) -> Tensor:
    return Tensor(np.asarray(d["data"], dtype=np.float64).reshape(d["shape"]), requires_grad=True)


@dataclass
class Checkpoint:
    kind: str
    net: object
    specs: list[ParamSpec] = field(default_factory=list)
    standardization: dict[str, Standardizer] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        net = self.net
        if isinstance(net, LstmParams):
            weights = {n: _pack(net.weights[n]) for n in LSTM_WEIGHTS}
        else:
            weights = {}
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                weights[f"W{k}"] = _pack(w)
                weights[f"b{k}"] = _pack(b)
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "arch": net.arch(),
            "weights": weights,
            "param_specs": [s.to_dict() for s in self.specs],
            "standardization": {k: v.to_dict() for k, v in self.standardization.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise NetError("not a dplc checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise NetError(f"unsupported checkpoint version {d.get('version')}")
        arch = d["arch"]
        if arch["type"] == "lstm":
            net = LstmParams(arch["input_dim"], arch["hidden_dim"], arch["output_dim"],
                             {n: _unpack(d["weights"][n]) for n in LSTM_WEIGHTS})
        elif arch["type"] == "mlp":
            n_layers = len(arch["sizes"]) - 1
            net = MlpParams([_unpack(d["weights"][f"W{k}"]) for k in range(n_layers)],
                            [_unpack(d["weights"][f"b{k}"]) for k in range(n_layers)],
                            list(arch["activations"]), float(arch.get("dropout_rate", 0.0)))
        else:
            raise NetError(f"unknown architecture {arch['type']!r}")
        net.validate()
        return cls(d["kind"], net, [ParamSpec.from_dict(s) for s in d["param_specs"]],
                   {k: Standardizer.from_dict(v) for k, v in d["standardization"].items()},
                   d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))


def net_tensors(net) -> list[Tensor]:
    return net.tensors()


def copy_net(net):
    if isinstance(net, LstmParams):
        return LstmParams(net.input_dim, net.hidden_dim, net.output_dim,
                          {k: Tensor(v.data.copy(), requires_grad=True) for k, v in net.weights.items()})
    return MlpParams([Tensor(w.data.copy(), requires_grad=True) for w in net.weights],
                     [Tensor(b.data.copy(), requires_grad=True) for b in net.biases],
                     list(net.activations), net.dropout_rate)


def physical_params(raw: Tensor, specs: Sequence[ParamSpec]):
    """Descale network output to physical units (thin wrapper kept for symmetry)."""
    return descale(raw, specs)
