"""Loss oracles, epoch accounting, training invariants and evaluation protocols."""
import dataclasses

import numpy as np
import pytest

from dplc import dpl_train
from dplc.autodiff import NonFiniteError, Tape, Tensor, backward
from dplc.dataland import DomainConfig, build_domain
from dplc.dpl_train import (DplDataset, DplError, EmptyMaskError, EpochLedger, TrainConfig, evaluate_dpl,
                            gz_window_for_eval, infer_raw, rmse_loss, simulate_numpy, train_dpl)
from dplc.metrics import metric_table


@pytest.fixture(scope="module")
def domain():
    return build_domain(DomainConfig(rows=16, cols=16, n_warmup_days=100, n_train_days=365, n_test_days=200,
                                     seed=1))


@pytest.fixture(scope="module")
def clean_domain():
    return build_domain(DomainConfig(rows=16, cols=16, n_warmup_days=100, n_train_days=365, n_test_days=200,
                                     noise_frac=0.0, seed=1))


def quick(**kw):
    base = dict(batch_sites=4, window_start="origin", spinup=100, learning_rate=1e-2, max_epochs=6,
                dropout=0.0, patience=None, eval_every=2, hidden=(8, 8))
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# loss


def test_rmse_identity_and_offset():
    obs = np.arange(12.0).reshape(4, 3)
    assert rmse_loss(Tensor(obs.copy()), obs).data == 0.0
    assert rmse_loss(Tensor(obs + 1.0), obs).data == pytest.approx(1.0, abs=1e-15)


def test_rmse_hand_two_sites():
    sim = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    obs = np.array([[1.0, 0.0], [1.0, 4.0], [np.nan, 9.0]])
    # residuals 0, 2, 2, 0, (nan dropped), -3 over 5 pairs: sqrt(17 / 5)
    assert rmse_loss(Tensor(sim), obs).data == pytest.approx(np.sqrt(17.0 / 5.0), rel=1e-15)
    mask = np.array([[True, False], [True, True], [True, True]])
    assert rmse_loss(Tensor(sim), obs, mask).data == pytest.approx(np.sqrt(13.0 / 4.0), rel=1e-15)


def test_rmse_empty_mask():
    with pytest.raises(EmptyMaskError):
        rmse_loss(Tensor(np.ones((2, 2))), np.full((2, 2), np.nan))
    with pytest.raises(DplError):
        rmse_loss(Tensor(np.ones((2, 2))), np.ones((2, 3)))


def test_rmse_gradient_matches_closed_form():
    rng = np.random.default_rng(0)
    sim, obs = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    t = Tensor(sim, requires_grad=True)
    with Tape() as tape:
        loss = rmse_loss(t, obs)
    g = backward(tape, loss)[t]
    expected = (sim - obs) / (sim.size * np.sqrt(np.mean((sim - obs) ** 2)))
    np.testing.assert_allclose(g, expected, rtol=1e-13)


def test_rmse_permutation_bit_identical():
    rng = np.random.default_rng(3)
    sim, obs = rng.normal(size=(400, 7)), rng.normal(size=(400, 7))
    ids = [f"c{i:03d}" for i in range(7)]
    perm = rng.permutation(7)
    t1, t2 = Tensor(sim, requires_grad=True), Tensor(sim[:, perm], requires_grad=True)
    with Tape() as tape:
        l1 = rmse_loss(t1, obs, site_ids=ids)
    g1 = backward(tape, l1)[t1]
    with Tape() as tape:
        l2 = rmse_loss(t2, obs[:, perm], site_ids=[ids[p] for p in perm])
    g2 = backward(tape, l2)[t2]
    assert l1.data.tobytes() == l2.data.tobytes()
    assert g1[:, perm].tobytes() == g2.tobytes()


# ---------------------------------------------------------------------------
# ledger


def test_ledger_one_pass_is_one_epoch():
    led = EpochLedger(10)
    led.add_sims(5)
    led.add_sims(5)
    assert led.epochs == 1.0
    led.record(0.3)
    led.add_sims(4)
    led.record(0.1)
    assert led.rows == [(1.0, 10, 0.3), (1.4, 14, 0.1)]
    assert led.epochs_to_threshold(0.2) == 1.4
    assert led.epochs_to_threshold(0.05) is None


def test_trace_epochs_non_decreasing(domain):
    ds = DplDataset.from_domain(domain, list(range(8)))
    res = train_dpl(ds, quick())
    ep = [r[0] for r in res.ledger.rows]
    assert len(ep) == res.steps // 2
    assert all(b >= a for a, b in zip(ep, ep[1:]))
    assert res.ledger.epochs == pytest.approx(6.0)


# ---------------------------------------------------------------------------
# config and guards


def test_config_guards(domain):
    with pytest.raises(DplError):
        TrainConfig(network="gB")
    with pytest.raises(DplError):
        TrainConfig(window_length=100, spinup=100)
    ds = DplDataset.from_domain(domain, list(range(4)))
    with pytest.raises(DplError, match="exceeds"):
        train_dpl(ds, quick(batch_sites=5))
    with pytest.raises(DplError, match="surrogate"):
        train_dpl(ds, quick(pbm="surrogate"))


def test_deterministic(domain):
    ds = DplDataset.from_domain(domain, list(range(8)))
    a, b = train_dpl(ds, quick(seed=5)), train_dpl(ds, quick(seed=5))
    assert a.ledger.rows == b.ledger.rows
    assert a.train_loss == b.train_loss
    for x, y in zip(a.model.net.tensors(), b.model.net.tensors()):
        assert x.data.tobytes() == y.data.tobytes()


def test_inferred_params_in_bounds(domain):
    ds = DplDataset.from_domain(domain, list(range(8)))
    res = train_dpl(ds, quick(learning_rate=0.5, max_epochs=4))
    raw = infer_raw(res.model, ds, ds.training)
    assert np.all((raw >= 0) & (raw <= 1))


def test_single_site_recovery(clean_domain):
    ds = DplDataset.from_domain(clean_domain, [200])
    res = train_dpl(ds, quick(batch_sites=1, max_epochs=1500, eval_every=50, hidden=(16, 16)))
    obs = ds.obs[ds.test_slice][:, 0]
    assert res.best_test_rmse < 0.05 * np.std(obs)


def test_nan_halves_lr_then_aborts(domain, monkeypatch):
    ds = DplDataset.from_domain(domain, list(range(4)))
    real = dpl_train.simulate_tensor
    calls = {"n": 0}

    def flaky(fail_on):
        def f(*a, **k):
            calls["n"] += 1
            if calls["n"] in fail_on:
                raise NonFiniteError("injected")
            return real(*a, **k)
        return f

    monkeypatch.setattr(dpl_train, "simulate_tensor", flaky({1}))
    res = train_dpl(ds, quick(max_epochs=4))
    assert res.status == "max_epochs"
    assert any("halved" in n for n in res.notes)
    calls["n"] = 0
    monkeypatch.setattr(dpl_train, "simulate_tensor", flaky({1, 3}))
    res = train_dpl(ds, quick(max_epochs=4))
    assert res.status == "aborted_nan"


# ---------------------------------------------------------------------------
# gZ and evaluation


def test_gz_never_reads_test_period(domain):
    ds = DplDataset.from_domain(domain, list(range(4)))
    res = train_dpl(ds, quick(network="gZ", window_length=200, gz_hidden=8, max_epochs=2))
    win = gz_window_for_eval(ds, 200)
    assert win.stop == ds.train_slice.stop
    raw = infer_raw(res.model, ds, ds.training)
    poisoned = dataclasses.replace(ds, obs=ds.obs.copy(), forcing=ds.forcing.copy())
    poisoned.obs[ds.test_slice] = 1e6
    poisoned.forcing[ds.test_slice] = 1e6
    np.testing.assert_array_equal(infer_raw(res.model, poisoned, ds.training), raw)


def test_temporal_equals_direct_simulation(domain):
    ds = DplDataset.from_domain(domain, list(range(4)))
    res = train_dpl(ds, quick(max_epochs=2))
    rows = evaluate_dpl(res.model, ds, "temporal")
    raw = infer_raw(res.model, ds, ds.training)
    sim = simulate_numpy(ds, raw, ds.forcing[:, ds.training], ds.attributes[ds.training])
    expected = metric_table(sim[ds.test_slice], ds.obs[ds.test_slice][:, ds.training],
                            [ds.site_ids[s] for s in ds.training])
    assert rows == expected


def test_spatial_neighbor_skips_training_sites(domain, caplog):
    ds = DplDataset.from_domain(domain, [0, 1], extra_cells=[2])
    res = train_dpl(ds, quick(batch_sites=2, max_epochs=2))
    rows = evaluate_dpl(res.model, ds, "spatial_neighbor", [(0, 1), (1, 2)])
    assert [r["site_id"] for r in rows] == [ds.site_ids[2]]
    assert "training site" in caplog.text
    with pytest.raises(DplError):
        evaluate_dpl(res.model, ds, "spatial_neighbor")
    with pytest.raises(DplError):
        evaluate_dpl(res.model, ds, "bogus")
