import numpy as np
import pytest

from dplc.params import bounds_array
from dplc.vic_lite import (
    DEFAULT_STRUCTURE, VicError, VicLiteState, infiltration_capacity, surface_runoff, vic_lite_simulate,
    vic_lite_step, vic_specs,
)

from helpers import seasonal_forcing

B = bounds_array(vic_specs())
S = DEFAULT_STRUCTURE


def random_params(rng, n):
    return B[:, 0] + rng.uniform(0.0, 1.0, size=(n, 5)) * (B[:, 1] - B[:, 0])


def test_infiltration_curve_identities():
    assert infiltration_capacity(0.0, 100.0, 2.0) == 0.0
    assert infiltration_capacity(1.0, 100.0, 2.0) == 100.0
    assert abs(infiltration_capacity(0.75, 100.0, 2.0) - 50.0) < 1e-12
    a = np.linspace(0, 1, 101)
    i = infiltration_capacity(a, 80.0, 0.3)
    assert np.all(np.diff(i) >= 0.0)
    with pytest.raises(VicError):
        infiltration_capacity(1.2, 100.0, 2.0)
    with pytest.raises(VicError):
        infiltration_capacity(-0.1, 100.0, 2.0)


def test_empty_system():
    p = random_params(np.random.default_rng(0), 3)
    st, fl = vic_lite_step(VicLiteState(np.zeros(3), np.zeros(3)), np.zeros(3), np.zeros(3), p)
    for k in ("surface_runoff", "baseflow", "et"):
        assert np.all(fl[k] == 0.0)
    assert np.all(st.layer1 == 0.0) and np.all(st.layer2 == 0.0)


def test_saturated_layer_sheds_all_precip():
    p = random_params(np.random.default_rng(1), 4)
    precip = np.array([1.0, 5.0, 20.0, 80.0])
    r = surface_runoff(precip, np.full(4, S.w1max), S.w1max, p[:, 0])
    np.testing.assert_allclose(r, precip, rtol=0, atol=1e-12)


def test_step_mass_balance():
    rng = np.random.default_rng(2)
    p = random_params(rng, 200)
    st = VicLiteState(rng.uniform(0, S.w1max, 200), rng.uniform(0, S.w2max, 200))
    precip, pet = rng.exponential(8.0, 200), rng.uniform(0, 6, 200)
    new, fl = vic_lite_step(st, precip, pet, p)
    resid = precip - (new.total() - st.total()) - fl["surface_runoff"] - fl["baseflow"] - fl["et"]
    assert np.max(np.abs(resid)) < 1e-8


def test_two_year_mass_balance_100_draws():
    rng = np.random.default_rng(3)
    p = random_params(rng, 100)
    f = seasonal_forcing(730, 4, 100)
    out = vic_lite_simulate(f, p)
    init = S.init_frac * (S.w1max + S.w2max)
    final = out["sm"][-1] * S.w1max + out["sm2"][-1] * S.w2max
    resid = f[..., 0].sum(0) - (final - init) - out["runoff"].sum(0) - out["et"].sum(0)
    assert np.max(np.abs(resid)) < 1e-6


def test_kernel_matches_step():
    rng = np.random.default_rng(4)
    p = random_params(rng, 10)
    f = seasonal_forcing(200, 5, 10)
    out = vic_lite_simulate(f, p)
    st = VicLiteState.initial(10)
    for t in range(200):
        st, fl = vic_lite_step(st, f[t, :, 0], f[t, :, 2], p)
        np.testing.assert_allclose(fl["soil_moisture_surface"], out["sm"][t], rtol=0, atol=1e-12)
        np.testing.assert_allclose(fl["et"], out["et"][t], rtol=0, atol=1e-12)


def test_larger_infilt_more_runoff_same_state():
    rng = np.random.default_rng(5)
    for _ in range(50):
        w1 = rng.uniform(0, S.w1max, 100)
        precip = rng.exponential(10.0, 100)
        b1 = rng.uniform(*B[0], 100)
        b2 = np.minimum(b1 + rng.uniform(0, 0.3, 100), B[0, 1])
        assert np.all(surface_runoff(precip, w1, S.w1max, b2) >= surface_runoff(precip, w1, S.w1max, b1) - 1e-12)


def test_larger_infilt_more_runoff_paired_step():
    rng = np.random.default_rng(6)
    for _ in range(50):
        p1 = random_params(rng, 50)
        p2 = p1.copy()
        p2[:, 0] = np.minimum(p1[:, 0] * 1.5, B[0, 1])
        st = VicLiteState(rng.uniform(0, S.w1max, 50), rng.uniform(0, S.w2max, 50))
        precip, pet = rng.exponential(8.0, 50), rng.uniform(0, 5, 50)
        _, f1 = vic_lite_step(st, precip, pet, p1)
        _, f2 = vic_lite_step(st, precip, pet, p2)
        assert np.all(f2["surface_runoff"] >= f1["surface_runoff"] - 1e-12)


def test_bounds_scan_and_demand_limit():
    rng = np.random.default_rng(7)
    p = random_params(rng, 100)
    f = seasonal_forcing(730, 8, 100)
    out = vic_lite_simulate(f, p)
    assert out["sm"].min() >= 0.0 and out["sm"].max() <= 1.0
    assert out["sm2"].min() >= 0.0 and out["sm2"].max() <= 1.0
    assert np.all(out["et"] <= f[..., 2] + 1e-12)


def test_determinism_and_spinup():
    p = random_params(np.random.default_rng(9), 5)
    f = seasonal_forcing(400, 1, 5)
    a = vic_lite_simulate(f, p)
    b = vic_lite_simulate(f, p)
    c = vic_lite_simulate(f, p, spinup=100)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
        assert a[k][100:].tobytes() == c[k].tobytes()


def test_invalid_inputs():
    p = random_params(np.random.default_rng(0), 1)
    with pytest.raises(VicError):
        vic_lite_step(VicLiteState.initial(1), [np.nan], [1.0], p)
    with pytest.raises(VicError):
        vic_lite_step(VicLiteState.initial(1), [-1.0], [1.0], p)
    bad = p.copy()
    bad[0, 0] = 0.0
    with pytest.raises(VicError):
        vic_lite_simulate(seasonal_forcing(10, 0), bad)
