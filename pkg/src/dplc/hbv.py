"""Differentiable HBV conceptual rainfall-runoff model.

Standard HBV-light structure (single elevation zone, daily step):

* snow: rain/snow split at ``TT``; snowfall corrected by ``SFCF``; degree-day
  melt ``CFMAX * max(T - TT, 0)`` capped by the snowpack; refreezing
  ``CFR * CFMAX * max(TT - T, 0)`` capped by the liquid water in the pack;
  the pack retains ``CWH * snowpack`` liquid water.
* soil: recharge fraction ``(SM / FC) ** BETA``; excess above FC goes to the
  upper zone; actual ET ``PET * min(SM / (LP * FC), 1)``, capped by SM.
* response: percolation ``min(PERC, SUZ)``; outflows
  ``K0 * max(SUZ - UZL, 0) + K1 * SUZ + K2 * SLZ``.
* routing: triangular unit hydrograph of base ``MAXBAS`` days.

Two implementations share these equations: :func:`hbv_simulate` records on
the autodiff tape (batched over sites), :func:`hbv_run` is a compiled
forward-only kernel used by calibration and as a cross-check.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numba
import numpy as np

from .autodiff import Tensor, apply, record_custom, stack
from .params import ParamSpec

PARAM_NAMES = ("TT", "CFMAX", "SFCF", "CFR", "CWH", "FC", "BETA", "LP",
               "K0", "K1", "K2", "UZL", "PERC", "MAXBAS")

# version 1 of the default bounds; these are choices, not published values
HBV_BOUNDS_VERSION = 1
HBV_BOUNDS = {
    "TT": (-2.5, 2.5),
    "CFMAX": (0.5, 10.0),
    "SFCF": (0.5, 1.5),
    "CFR": (0.0, 0.1),
    "CWH": (0.0, 0.2),
    "FC": (50.0, 1000.0),
    "BETA": (1.0, 6.0),
    "LP": (0.2, 1.0),
    "K0": (0.1, 0.5),
    "K1": (0.01, 0.1),
    "K2": (1e-4, 0.01),
    "UZL": (0.0, 100.0),
    "PERC": (0.0, 10.0),
    "MAXBAS": (1.0, 7.0),
}
HBV_FIXED = {"CFR": 0.05, "CWH": 0.1}
MAXBAS_LEN = 7  # kernel length covering the MAXBAS upper bound

STATE_NAMES = ("snowpack", "liquid", "sm", "suz", "slz")


def hbv_specs(calibrate_all: bool = False, bounds: Mapping | None = None) -> list[ParamSpec]:
    """Parameter specs in model order; CFR and CWH fixed unless ``calibrate_all``."""
    bounds = dict(HBV_BOUNDS, **(bounds or {}))
    specs = []
    for name in PARAM_NAMES:
        lo, hi = bounds[name]
        fixed = name in HBV_FIXED and not calibrate_all
        specs.append(ParamSpec(name, lo, hi, calibrated=not fixed, default=HBV_FIXED.get(name)))
    if bounds["MAXBAS"][0] < 1.0 or bounds["MAXBAS"][1] > MAXBAS_LEN:
        raise ValueError(f"MAXBAS bounds must lie within [1, {MAXBAS_LEN}]")
    return specs


class HbvError(RuntimeError):
    pass


@dataclass
class HbvState:
    snowpack: object
    liquid: object
    sm: object
    suz: object
    slz: object

    @classmethod
    def zeros(cls, n: int) -> "HbvState":
        return cls(*(Tensor(np.zeros(n)) for _ in STATE_NAMES))

    def total(self) -> np.ndarray:
        return sum(_val(getattr(self, k)) for k in STATE_NAMES)

    def values(self) -> dict[str, np.ndarray]:
        return {k: np.array(_val(getattr(self, k))) for k in STATE_NAMES}


def _val(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _minimum(a, b):
    return apply("minimum", a, b)


def as_param_dict(p) -> dict:
    """Accept a mapping name -> value/Tensor or a sequence in PARAM_NAMES order."""
    if isinstance(p, Mapping):
        missing = set(PARAM_NAMES) - set(p)
        if missing:
            raise KeyError(f"missing HBV parameters: {sorted(missing)}")
        return {k: p[k] for k in PARAM_NAMES}
    if len(p) != len(PARAM_NAMES):
        raise ValueError(f"expected {len(PARAM_NAMES)} HBV parameters, got {len(p)}")
    return dict(zip(PARAM_NAMES, p))


def _check_forcing(precip, temp, pet):
    if not (np.isfinite(precip).all() and np.isfinite(temp).all() and np.isfinite(pet).all()):
        raise HbvError("non-finite forcing")
    if np.any(precip < 0) or np.any(pet < 0):
        raise HbvError("precip and pet must be non-negative")


def hbv_step(state: HbvState, precip, temp, pet, p) -> tuple[HbvState, dict]:
    """Advance one day.  Fluxes returned: runoff_unrouted, et_actual, recharge.

    ``precip``, ``temp``, ``pet`` are plain arrays (one value per site);
    parameters may be Tensors.  Water input is rain plus SFCF-corrected
    snowfall, so ``rain + snowfall = d(storage) + runoff + et``.
    """
    precip = np.asarray(precip, dtype=np.float64)
    temp = np.asarray(temp, dtype=np.float64)
    pet = np.asarray(pet, dtype=np.float64)
    _check_forcing(precip, temp, pet)
    p = {k: _t(v) for k, v in as_param_dict(p).items()}
    state = HbvState(*(_t(getattr(state, k)) for k in STATE_NAMES))
    return _step(state, precip, temp, pet, p)


def _step(state, precip, temp, pet, p):
    tt = p["TT"]
    snow_mask = temp < tt.data
    rain = np.where(snow_mask, 0.0, precip)
    snowfall = p["SFCF"] * np.where(snow_mask, precip, 0.0)

    sp = state.snowpack + snowfall
    pot_melt = apply("relu", p["CFMAX"] * (temp - tt))
    melt = _minimum(pot_melt, sp)
    sp = sp - melt
    liq = state.liquid + melt
    pot_refr = apply("relu", p["CFR"] * p["CFMAX"] * (tt - temp))
    refr = _minimum(pot_refr, liq)
    sp = sp + refr
    liq = liq - refr
    tosoil = apply("relu", liq - p["CWH"] * sp)
    liq = liq - tosoil

    fc = p["FC"]
    infil = tosoil + rain
    wet = apply("pow", state.sm / fc, p["BETA"])
    recharge = infil * wet
    sm = state.sm + infil - recharge
    excess = apply("relu", sm - fc)
    sm = sm - excess
    evap_factor = apply("min", sm / (p["LP"] * fc), value=1.0)
    et = _minimum(evap_factor * pet, sm)
    sm = sm - et

    suz = state.suz + recharge + excess
    perc = _minimum(p["PERC"], suz)
    suz = suz - perc
    q0 = p["K0"] * apply("relu", suz - p["UZL"])
    suz = suz - q0
    q1 = p["K1"] * suz
    suz = suz - q1
    slz = state.slz + perc
    q2 = p["K2"] * slz
    slz = slz - q2
    q = q0 + q1 + q2

    new = HbvState(sp, liq, sm, suz, slz)
    lowest = min(sp.data.min(), liq.data.min(), sm.data.min(), suz.data.min(), slz.data.min())
    if lowest < -1e-9:
        raise HbvError(f"negative storage ({lowest:.3e} mm) after update")
    return new, {"runoff_unrouted": q, "et_actual": et, "recharge": recharge,
                 "snowfall": snowfall, "rain": rain}


def triangle_weights(maxbas):
    """Discrete triangular kernel of base ``maxbas`` (shape ``(..., MAXBAS_LEN)``).

    Weight ``i`` is the integral of the unit-area triangle on ``[0, maxbas]``
    over ``[i, i + 1]``; weights are non-negative, sum to one, and vary
    smoothly with a fractional ``maxbas``.
    """
    is_t = isinstance(maxbas, Tensor)
    mb = maxbas if is_t else np.asarray(maxbas, dtype=np.float64)
    if np.any(_val(mb) < 1.0 - 1e-12):
        raise ValueError("MAXBAS must be >= 1")
    cdf = [np.zeros(np.shape(_val(mb)))]
    for i in range(1, MAXBAS_LEN + 1):
        u = apply("clamp", float(i) / _t(mb), lo=0.0, hi=1.0)
        lower_half = _val(u) <= 0.5
        rising = 2.0 * apply("square", u)
        falling = 1.0 - 2.0 * apply("square", 1.0 - u)
        cdf.append(rising * lower_half + falling * (~lower_half))
    w = [cdf[i + 1] - cdf[i] for i in range(MAXBAS_LEN)]
    out = stack(w, axis=-1)
    return out if is_t else out.data


def routing_maxbas(runoff, maxbas):
    """Convolve ``runoff`` (time on axis 0, sites on axis 1) with the MAXBAS kernel.

    Water routed past the end of the series is dropped; totals match when the
    series ends with at least ``MAXBAS`` quiet steps.
    """
    is_t = isinstance(runoff, Tensor) or isinstance(maxbas, Tensor)
    q = _t(runoff)
    if q.ndim == 1:
        q = apply("slice", q, index=(slice(None), None))
    w = triangle_weights(_t(maxbas))
    n_t = q.shape[0]
    out = None
    for lag in range(MAXBAS_LEN):
        if lag >= n_t:
            break
        wl = apply("slice", w, index=(..., lag))
        if lag == 0:
            shifted = q
        else:
            pad = np.zeros((lag,) + q.shape[1:])
            shifted = apply("concat", pad, apply("slice", q, index=slice(0, n_t - lag)), axis=0)
        term = shifted * wl
        out = term if out is None else out + term
    if np.ndim(runoff) == 1 and not isinstance(runoff, Tensor):
        out = apply("slice", out, index=(slice(None), 0))
    elif isinstance(runoff, Tensor) and runoff.ndim == 1:
        out = apply("slice", out, index=(slice(None), 0))
    return out if is_t else out.data


def _split_forcing(forcing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    f = np.asarray(forcing, dtype=np.float64)
    if f.ndim == 2:
        f = f[:, None, :]
    if f.ndim != 3 or f.shape[-1] != 3:
        raise ValueError("forcing must have shape (time, [sites,] 3) with columns precip, temp, pet")
    return f[..., 0], f[..., 1], f[..., 2]


def hbv_simulate(forcing, p, spinup: int = 0, state: HbvState | None = None,
                 return_fluxes: bool = False):
    """Run HBV over ``forcing`` (``(T, n_sites, 3)``: precip, temp, pet).

    Returns routed discharge (mm/d) as a Tensor of shape ``(T - spinup, n_sites)``;
    the first ``spinup`` steps are simulated but dropped.  With
    ``return_fluxes`` a dict of per-step series is returned as well.
    """
    precip, temp, pet = _split_forcing(forcing)
    n_t, n = precip.shape
    if spinup < 0 or n_t <= spinup:
        raise ValueError(f"series of length {n_t} too short for spinup {spinup}")
    _check_forcing(precip, temp, pet)
    p = {k: _t(v) for k, v in as_param_dict(p).items()}
    st = state or HbvState.zeros(n)
    st = HbvState(*(_t(getattr(st, k)) for k in STATE_NAMES))
    qs, ets = [], []
    for t in range(n_t):
        st, fl = _step(st, precip[t], temp[t], pet[t], p)
        qs.append(fl["runoff_unrouted"])
        ets.append(fl["et_actual"])
    q = stack(qs, axis=0)
    routed = routing_maxbas(q, _t(p["MAXBAS"]))
    out = apply("slice", routed, index=slice(spinup, None))
    if return_fluxes:
        return out, {"runoff_unrouted": q, "et_actual": stack(ets, axis=0), "state": st}
    return out


# ---------------------------------------------------------------------------
# compiled forward-only kernel


@numba.njit(cache=True)
def _tri_cdf(u):
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    if u <= 0.5:
        return 2.0 * u * u
    return 1.0 - 2.0 * (1.0 - u) * (1.0 - u)


@numba.njit(cache=True)
def _hbv_kernel(precip, temp, pet, params, out_q, out_et):
    n_t, n = precip.shape
    for j in range(n):
        tt = params[j, 0]
        cfmax = params[j, 1]
        sfcf = params[j, 2]
        cfr = params[j, 3]
        cwh = params[j, 4]
        fc = params[j, 5]
        beta = params[j, 6]
        lp = params[j, 7]
        k0 = params[j, 8]
        k1 = params[j, 9]
        k2 = params[j, 10]
        uzl = params[j, 11]
        percmax = params[j, 12]
        maxbas = params[j, 13]
        w = np.empty(7)
        prev = 0.0
        for i in range(7):
            c = _tri_cdf((i + 1.0) / maxbas)
            w[i] = c - prev
            prev = c
        snow = 0.0
        liq = 0.0
        sm = 0.0
        suz = 0.0
        slz = 0.0
        for t in range(n_t):
            p = precip[t, j]
            tc = temp[t, j]
            if tc < tt:
                snow += sfcf * p
                rain = 0.0
            else:
                rain = p
            melt = cfmax * (tc - tt)
            if melt < 0.0:
                melt = 0.0
            if melt > snow:
                melt = snow
            snow -= melt
            liq += melt
            refr = cfr * cfmax * (tt - tc)
            if refr < 0.0:
                refr = 0.0
            if refr > liq:
                refr = liq
            snow += refr
            liq -= refr
            tosoil = liq - cwh * snow
            if tosoil < 0.0:
                tosoil = 0.0
            liq -= tosoil
            inflow = rain + tosoil
            rech = inflow * (sm / fc) ** beta
            sm += inflow - rech
            excess = sm - fc
            if excess < 0.0:
                excess = 0.0
            sm -= excess
            ef = sm / (lp * fc)
            if ef > 1.0:
                ef = 1.0
            et = ef * pet[t, j]
            if et > sm:
                et = sm
            sm -= et
            suz += rech + excess
            perc = percmax if percmax < suz else suz
            suz -= perc
            q0 = suz - uzl
            q0 = k0 * q0 if q0 > 0.0 else 0.0
            suz -= q0
            q1 = k1 * suz
            suz -= q1
            slz += perc
            q2 = k2 * slz
            slz -= q2
            q = q0 + q1 + q2
            out_et[t, j] = et
            for i in range(7):
                if t + i < n_t:
                    out_q[t + i, j] += w[i] * q


def hbv_run(forcing, params, spinup: int = 0, return_et: bool = False):
    """Forward-only HBV for many parameter sets.

    ``forcing``: ``(T, n, 3)`` or ``(T, 3)`` (shared by all rows of ``params``);
    ``params``: ``(n, 14)`` physical values in PARAM_NAMES order.
    Returns discharge ``(T - spinup, n)``.
    """
    params = np.ascontiguousarray(np.atleast_2d(params), dtype=np.float64)
    precip, temp, pet = _split_forcing(forcing)
    n = params.shape[0]
    if precip.shape[1] == 1 and n > 1:
        precip, temp, pet = (np.repeat(a, n, axis=1) for a in (precip, temp, pet))
    if precip.shape[1] != n:
        raise ValueError("forcing sites and parameter rows differ")
    if precip.shape[0] <= spinup:
        raise ValueError("series too short for spinup")
    q = np.zeros(precip.shape)
    et = np.zeros(precip.shape)
    _hbv_kernel(np.ascontiguousarray(precip), np.ascontiguousarray(temp),
                np.ascontiguousarray(pet), params, q, et)
    if return_et:
        return q[spinup:], et[spinup:]
    return q[spinup:]


# ---------------------------------------------------------------------------
# fused differentiable kernel: forward values plus forward-mode sensitivities
# of the routed discharge with respect to all 14 parameters.  Branch and tie
# conventions match the tape ops (relu/clamp strict, minimum ties -> first).

_NP = 14


@numba.njit(cache=True)
def _hbv_sens_kernel(precip, temp, pet, params, out_q, out_j):
    n_t, n = precip.shape
    for j in range(n):
        tt = params[j, 0]
        cfmax = params[j, 1]
        sfcf = params[j, 2]
        cfr = params[j, 3]
        cwh = params[j, 4]
        fc = params[j, 5]
        beta = params[j, 6]
        lp = params[j, 7]
        k0 = params[j, 8]
        k1 = params[j, 9]
        k2 = params[j, 10]
        uzl = params[j, 11]
        percmax = params[j, 12]
        mb = params[j, 13]
        w = np.empty(7)
        dw = np.empty(7)
        prev = 0.0
        dprev = 0.0
        for i in range(7):
            u = (i + 1.0) / mb
            if u >= 1.0:
                c = 1.0
                dc = 0.0
            elif u <= 0.5:
                c = 2.0 * u * u
                dc = 4.0 * u * (-(i + 1.0) / (mb * mb))
            else:
                c = 1.0 - 2.0 * (1.0 - u) * (1.0 - u)
                dc = 4.0 * (1.0 - u) * (-(i + 1.0) / (mb * mb))
            w[i] = c - prev
            dw[i] = dc - dprev
            prev = c
            dprev = dc
        snow = 0.0
        liq = 0.0
        sm = 0.0
        suz = 0.0
        slz = 0.0
        dsnow = np.zeros(_NP)
        dliq = np.zeros(_NP)
        dsm = np.zeros(_NP)
        dsuz = np.zeros(_NP)
        dslz = np.zeros(_NP)
        dx = np.zeros(_NP)
        dy = np.zeros(_NP)
        dq = np.zeros(_NP)
        dinf = np.zeros(_NP)
        dwet = np.zeros(_NP)
        drech = np.zeros(_NP)
        dexc = np.zeros(_NP)
        for t in range(n_t):
            p = precip[t, j]
            tc = temp[t, j]
            e = pet[t, j]
            if tc < tt:
                snow += sfcf * p
                dsnow[2] += p
                rain = 0.0
            else:
                rain = p
            # melt
            pm = cfmax * (tc - tt)
            if pm > 0.0:
                for k in range(_NP):
                    dx[k] = 0.0
                dx[1] = tc - tt
                dx[0] = -cfmax
            else:
                pm = 0.0
                for k in range(_NP):
                    dx[k] = 0.0
            if pm <= snow:
                melt = pm
                for k in range(_NP):
                    dy[k] = dx[k]
            else:
                melt = snow
                for k in range(_NP):
                    dy[k] = dsnow[k]
            snow -= melt
            liq += melt
            for k in range(_NP):
                dsnow[k] -= dy[k]
                dliq[k] += dy[k]
            # refreeze
            pr = cfr * cfmax * (tt - tc)
            for k in range(_NP):
                dx[k] = 0.0
            if pr > 0.0:
                dx[3] = cfmax * (tt - tc)
                dx[1] = cfr * (tt - tc)
                dx[0] = cfr * cfmax
            else:
                pr = 0.0
            if pr <= liq:
                refr = pr
                for k in range(_NP):
                    dy[k] = dx[k]
            else:
                refr = liq
                for k in range(_NP):
                    dy[k] = dliq[k]
            snow += refr
            liq -= refr
            for k in range(_NP):
                dsnow[k] += dy[k]
                dliq[k] -= dy[k]
            # release to soil
            ts = liq - cwh * snow
            if ts > 0.0:
                for k in range(_NP):
                    dx[k] = dliq[k] - cwh * dsnow[k]
                dx[4] -= snow
            else:
                ts = 0.0
                for k in range(_NP):
                    dx[k] = 0.0
            liq -= ts
            for k in range(_NP):
                dliq[k] -= dx[k]
                dinf[k] = dx[k]
            inflow = rain + ts
            # soil
            ratio = sm / fc
            wet = ratio ** beta
            if ratio != 0.0:
                da = beta * wet / ratio
            else:
                da = 1.0 if beta == 1.0 else 0.0
            db = wet * np.log(ratio) if ratio > 0.0 else 0.0
            for k in range(_NP):
                dwet[k] = da * (dsm[k] / fc)
            dwet[5] -= da * sm / (fc * fc)
            dwet[6] += db
            rech = inflow * wet
            for k in range(_NP):
                drech[k] = dinf[k] * wet + inflow * dwet[k]
            sm += inflow - rech
            for k in range(_NP):
                dsm[k] += dinf[k] - drech[k]
            exc = sm - fc
            if exc > 0.0:
                for k in range(_NP):
                    dexc[k] = dsm[k]
                dexc[5] -= 1.0
            else:
                exc = 0.0
                for k in range(_NP):
                    dexc[k] = 0.0
            sm -= exc
            for k in range(_NP):
                dsm[k] -= dexc[k]
            efr = sm / (lp * fc)
            if efr < 1.0:
                for k in range(_NP):
                    dx[k] = dsm[k] / (lp * fc)
                dx[7] -= sm / (lp * lp * fc)
                dx[5] -= sm / (lp * fc * fc)
            else:
                efr = 1.0
                for k in range(_NP):
                    dx[k] = 0.0
            etp = efr * e
            if etp <= sm:
                et = etp
                for k in range(_NP):
                    dy[k] = dx[k] * e
            else:
                et = sm
                for k in range(_NP):
                    dy[k] = dsm[k]
            sm -= et
            for k in range(_NP):
                dsm[k] -= dy[k]
            # response
            suz += rech + exc
            for k in range(_NP):
                dsuz[k] += drech[k] + dexc[k]
            if percmax <= suz:
                perc = percmax
                for k in range(_NP):
                    dy[k] = 0.0
                dy[12] = 1.0
            else:
                perc = suz
                for k in range(_NP):
                    dy[k] = dsuz[k]
            suz -= perc
            for k in range(_NP):
                dsuz[k] -= dy[k]
                dslz[k] += dy[k]
            yv = suz - uzl
            if yv > 0.0:
                q0 = k0 * yv
                for k in range(_NP):
                    dx[k] = k0 * dsuz[k]
                dx[11] -= k0
                dx[8] += yv
            else:
                q0 = 0.0
                for k in range(_NP):
                    dx[k] = 0.0
            suz -= q0
            for k in range(_NP):
                dsuz[k] -= dx[k]
                dq[k] = dx[k]
            q1 = k1 * suz
            for k in range(_NP):
                dx[k] = k1 * dsuz[k]
            dx[9] += suz
            suz -= q1
            for k in range(_NP):
                dsuz[k] -= dx[k]
                dq[k] += dx[k]
            slz += perc
            q2 = k2 * slz
            for k in range(_NP):
                dx[k] = k2 * dslz[k]
            dx[10] += slz
            slz -= q2
            for k in range(_NP):
                dslz[k] -= dx[k]
                dq[k] += dx[k]
            q = q0 + q1 + q2
            for i in range(7):
                if t + i < n_t:
                    out_q[t + i, j] += w[i] * q
                    for k in range(_NP):
                        out_j[t + i, j, k] += w[i] * dq[k]
                    out_j[t + i, j, 13] += dw[i] * q


def hbv_sensitivities(forcing, params):
    """Routed discharge ``(T, n)`` and its Jacobian ``(T, n, 14)`` w.r.t. parameters."""
    params = np.ascontiguousarray(np.atleast_2d(params), dtype=np.float64)
    precip, temp, pet = _split_forcing(forcing)
    q = np.zeros(precip.shape)
    jac = np.zeros(precip.shape + (_NP,))
    _hbv_sens_kernel(np.ascontiguousarray(precip), np.ascontiguousarray(temp),
                     np.ascontiguousarray(pet), params, q, jac)
    return q, jac


def hbv_simulate_fused(forcing, params: Tensor, spinup: int = 0) -> Tensor:
    """Differentiable HBV as a single tape node.

    ``params`` is an ``(n_sites, 14)`` Tensor of physical values.  Same
    output as :func:`hbv_simulate`; the gradient is assembled from the
    forward sensitivities.
    """
    precip, temp, pet = _split_forcing(forcing)
    _check_forcing(precip, temp, pet)
    if spinup < 0 or precip.shape[0] <= spinup:
        raise ValueError(f"series of length {precip.shape[0]} too short for spinup {spinup}")
    params = params if isinstance(params, Tensor) else Tensor(params)
    if params.ndim != 2 or params.shape[1] != _NP or params.shape[0] != precip.shape[1]:
        raise ValueError(f"params must have shape ({precip.shape[1]}, {_NP})")
    if np.any(params.data[:, 13] < 1.0):
        raise ValueError("MAXBAS must be >= 1")
    q, jac = hbv_sensitivities(forcing, params.data)
    q, jac = q[spinup:], jac[spinup:]

    def vjp(g):
        return (np.einsum("tn,tnk->nk", g, jac),)

    return record_custom("hbv", [params], q, vjp)
