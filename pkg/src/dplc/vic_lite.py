"""VIC-style two-layer soil column (forward only).

Per daily step, in order:

1. Surface runoff from the variable infiltration curve over layer 1.  With
   shape ``b = INFILT`` and maximum infiltration capacity
   ``i_m = (1 + b) * W1max``, the point capacity for the current wetness is
   ``i0 = i_m * (1 - (1 - W1/W1max) ** (1 / (1 + b)))`` and the runoff of a
   precipitation depth ``P`` is
   ``P - (W1max - W1) + W1max * (1 - (i0 + P) / i_m) ** (1 + b)``
   (saturation excess ``P - (W1max - W1)`` once ``i0 + P >= i_m``).
2. Evapotranspiration ``PET * [(1 - r) * beta(W1) + r * beta(W2)]`` where
   ``beta(W) = min(W / (c * Wmax), 1)`` and ``r`` is the layer-2 root
   fraction; each layer's draw is capped by its storage.
3. Drainage layer 1 -> 2: ``KSAT * (W1/W1max) ** EXPT * (1 - W2/W2max)``.
4. ARNO baseflow from layer 2: linear ``Ds*Dsmax/(Ws*W2max) * W2`` plus the
   quadratic term ``(Dsmax - Ds*Dsmax/Ws) * ((W2 - Ws*W2max)/(W2max - Ws*W2max))**2``
   above ``Ws * W2max``.

The observed channel is the layer-1 wetness fraction ``W1 / W1max``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .params import ParamSpec

PARAM_NAMES = ("INFILT", "Ds", "Dsmax", "Ws", "EXPT")
VIC_BOUNDS_VERSION = 1
VIC_BOUNDS = {
    "INFILT": (0.01, 0.6),
    "Ds": (0.01, 0.9),
    "Dsmax": (1.0, 30.0),
    "Ws": (0.3, 0.95),
    "EXPT": (3.0, 20.0),
}


@dataclass(frozen=True)
class VicStructure:
    """Fixed structural constants of the column."""
    th1: float = 100.0       # layer-1 thickness, mm
    th2: float = 900.0       # layer-2 thickness, mm
    porosity: float = 0.45
    ksat: float = 40.0       # max drainage, mm/d
    root2: float = 0.5       # share of ET demand drawn from layer 2
    et_crit: float = 0.7     # wetness fraction above which ET is demand-limited
    init_frac: float = 0.5   # initial wetness of both layers

    @property
    def w1max(self) -> float:
        return self.th1 * self.porosity

    @property
    def w2max(self) -> float:
        return self.th2 * self.porosity

    def as_array(self) -> np.ndarray:
        return np.array([self.w1max, self.w2max, self.ksat, self.root2, self.et_crit, self.init_frac])


DEFAULT_STRUCTURE = VicStructure()


def vic_specs(bounds=None) -> list[ParamSpec]:
    bounds = dict(VIC_BOUNDS, **(bounds or {}))
    return [ParamSpec(n, *bounds[n]) for n in PARAM_NAMES]


class VicError(RuntimeError):
    pass


def infiltration_capacity(a_f, i_m, infilt):
    """Point infiltration capacity at saturated-area fraction ``a_f``:
    ``i_m * (1 - (1 - a_f) ** (1 / infilt))``."""
    a_f = np.asarray(a_f, dtype=np.float64)
    if np.any(a_f < 0.0) or np.any(a_f > 1.0):
        raise VicError("saturated-area fraction must lie in [0, 1]")
    infilt = np.asarray(infilt, dtype=np.float64)
    if np.any(infilt <= 0.0):
        raise VicError("INFILT must be positive")
    return i_m * (1.0 - (1.0 - a_f) ** (1.0 / infilt))


def saturated_fraction(w1, w1max, infilt):
    """Saturated-area fraction implied by layer-1 storage."""
    return 1.0 - (1.0 - np.clip(w1 / w1max, 0.0, 1.0)) ** (infilt / (1.0 + infilt))


def surface_runoff(precip, w1, w1max, infilt):
    precip = np.asarray(precip, dtype=np.float64)
    b = np.asarray(infilt, dtype=np.float64)
    i_m = (1.0 + b) * w1max
    a_f = saturated_fraction(w1, w1max, b)
    i0 = infiltration_capacity(a_f, i_m, b)
    deficit = w1max - w1
    frac = np.clip(1.0 - (i0 + precip) / i_m, 0.0, 1.0)
    r = precip - deficit + w1max * frac ** (1.0 + b)
    return np.clip(r, 0.0, precip)


@dataclass
class VicLiteState:
    layer1: np.ndarray
    layer2: np.ndarray

    @classmethod
    def initial(cls, n: int, structure: VicStructure = DEFAULT_STRUCTURE) -> "VicLiteState":
        return cls(np.full(n, structure.init_frac * structure.w1max),
                   np.full(n, structure.init_frac * structure.w2max))

    def total(self) -> np.ndarray:
        return self.layer1 + self.layer2


def _params_matrix(p) -> np.ndarray:
    if isinstance(p, dict):
        p = np.stack([np.atleast_1d(np.asarray(p[n], dtype=np.float64)) for n in PARAM_NAMES], axis=-1)
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if p.shape[-1] != len(PARAM_NAMES):
        raise VicError(f"expected {len(PARAM_NAMES)} VIC-lite parameters")
    if np.any(p[:, 0] <= 0) or np.any((p[:, 1] < 0) | (p[:, 1] > 1)) or np.any(p[:, 2] <= 0) \
            or np.any((p[:, 3] <= 0) | (p[:, 3] >= 1)):
        raise VicError("VIC-lite parameters outside their admissible ranges")
    return p


def vic_lite_step(state: VicLiteState, precip, pet, p, structure: VicStructure = DEFAULT_STRUCTURE):
    """One daily step for a vector of cells (plain numpy; forward only)."""
    precip = np.asarray(precip, dtype=np.float64)
    pet = np.asarray(pet, dtype=np.float64)
    if not (np.isfinite(precip).all() and np.isfinite(pet).all()):
        raise VicError("non-finite forcing")
    if np.any(precip < 0) or np.any(pet < 0):
        raise VicError("precip and pet must be non-negative")
    pm = _params_matrix(p)
    b, ds, dsmax, ws, expt = pm.T
    s = structure
    w1max, w2max = s.w1max, s.w2max
    w1 = np.array(state.layer1, dtype=np.float64)
    w2 = np.array(state.layer2, dtype=np.float64)

    runoff = surface_runoff(precip, w1, w1max, b)
    w1 = w1 + precip - runoff
    w1 = np.minimum(w1, w1max)

    demand1 = pet * (1.0 - s.root2) * np.minimum(w1 / (s.et_crit * w1max), 1.0)
    demand2 = pet * s.root2 * np.minimum(w2 / (s.et_crit * w2max), 1.0)
    e1 = np.minimum(demand1, w1)
    e2 = np.minimum(demand2, w2)
    w1 = w1 - e1
    w2 = w2 - e2

    drain = s.ksat * (w1 / w1max) ** expt * (1.0 - w2 / w2max)
    drain = np.minimum(np.minimum(drain, w1), w2max - w2)
    drain = np.maximum(drain, 0.0)
    w1 = w1 - drain
    w2 = w2 + drain

    lin = ds * dsmax / (ws * w2max) * w2
    over = np.maximum(w2 - ws * w2max, 0.0) / (w2max - ws * w2max)
    base = lin + (dsmax - ds * dsmax / ws) * over ** 2
    base = np.clip(base, 0.0, w2)
    w2 = w2 - base

    if min(w1.min(), w2.min()) < -1e-9 or w1.max() > w1max + 1e-9 or w2.max() > w2max + 1e-9:
        raise VicError("storage outside capacity after update")
    fluxes = {"surface_runoff": runoff, "baseflow": base, "et": e1 + e2,
              "soil_moisture_surface": w1 / w1max, "drainage": drain}
    return VicLiteState(w1, w2), fluxes


@numba.njit(cache=True)
def _vic_kernel(precip, pet, params, sconst, out_sm, out_et, out_q, out_sm2):
    n_t, n = precip.shape
    w1max = sconst[0]
    w2max = sconst[1]
    ksat = sconst[2]
    root2 = sconst[3]
    crit = sconst[4]
    init = sconst[5]
    for j in range(n):
        b = params[j, 0]
        ds = params[j, 1]
        dsmax = params[j, 2]
        ws = params[j, 3]
        expt = params[j, 4]
        w1 = init * w1max
        w2 = init * w2max
        i_m = (1.0 + b) * w1max
        for t in range(n_t):
            p = precip[t, j]
            e = pet[t, j]
            ratio = w1 / w1max
            if ratio > 1.0:
                ratio = 1.0
            a_f = 1.0 - (1.0 - ratio) ** (b / (1.0 + b))
            i0 = i_m * (1.0 - (1.0 - a_f) ** (1.0 / b))
            frac = 1.0 - (i0 + p) / i_m
            if frac < 0.0:
                frac = 0.0
            if frac > 1.0:
                frac = 1.0
            r = p - (w1max - w1) + w1max * frac ** (1.0 + b)
            if r < 0.0:
                r = 0.0
            if r > p:
                r = p
            w1 = w1 + p - r
            if w1 > w1max:
                w1 = w1max
            f1 = w1 / (crit * w1max)
            if f1 > 1.0:
                f1 = 1.0
            f2 = w2 / (crit * w2max)
            if f2 > 1.0:
                f2 = 1.0
            e1 = e * (1.0 - root2) * f1
            if e1 > w1:
                e1 = w1
            e2 = e * root2 * f2
            if e2 > w2:
                e2 = w2
            w1 -= e1
            w2 -= e2
            d = ksat * (w1 / w1max) ** expt * (1.0 - w2 / w2max)
            if d > w1:
                d = w1
            if d > w2max - w2:
                d = w2max - w2
            if d < 0.0:
                d = 0.0
            w1 -= d
            w2 += d
            lin = ds * dsmax / (ws * w2max) * w2
            over = w2 - ws * w2max
            if over < 0.0:
                over = 0.0
            over = over / (w2max - ws * w2max)
            base = lin + (dsmax - ds * dsmax / ws) * over * over
            if base < 0.0:
                base = 0.0
            if base > w2:
                base = w2
            w2 -= base
            out_sm[t, j] = w1 / w1max
            out_sm2[t, j] = w2 / w2max
            out_et[t, j] = e1 + e2
            out_q[t, j] = r + base


def vic_lite_simulate(forcing, params, spinup: int = 0, structure: VicStructure = DEFAULT_STRUCTURE) -> dict:
    """Simulate many cells.

    ``forcing``: ``(T, n, 3)`` (precip, temp, pet) or ``(T, 3)`` shared by all
    parameter rows; ``params``: ``(n, 5)`` physical values.  Returns a dict of
    ``(T - spinup, n)`` arrays: ``sm`` (layer-1 wetness fraction), ``et``,
    ``runoff`` (surface + baseflow) and ``sm2``.
    """
    pm = np.ascontiguousarray(_params_matrix(params))
    f = np.asarray(forcing, dtype=np.float64)
    if f.ndim == 2:
        f = f[:, None, :]
    n = pm.shape[0]
    if f.shape[1] == 1 and n > 1:
        f = np.repeat(f, n, axis=1)
    if f.shape[1] != n:
        raise VicError("forcing sites and parameter rows differ")
    if f.shape[0] <= spinup:
        raise VicError("series too short for spinup")
    precip = np.ascontiguousarray(f[..., 0])
    pet = np.ascontiguousarray(f[..., 2])
    if not (np.isfinite(precip).all() and np.isfinite(pet).all()):
        raise VicError("non-finite forcing")
    out = {k: np.zeros(precip.shape) for k in ("sm", "et", "runoff", "sm2")}
    _vic_kernel(precip, pet, pm, structure.as_array(), out["sm"], out["et"], out["runoff"], out["sm2"])
    return {k: v[spinup:] for k, v in out.items()}
