import numpy as np
import pytest

from dplc.dataland import (
    BasinRecord, BasinSet, DataError, DomainConfig, adjacent_correlation, build_domain, fold_rotations,
    generate_basins, load_basin_csv, load_domain, make_folds, neighbor_of, neighbor_pairs, sample_patches,
    save_domain, subsample_training, write_basin_csv,
)

SMALL = dict(rows=32, cols=32, n_warmup_days=60, n_train_days=120, n_test_days=60)


@pytest.fixture(scope="module")
def small_domain():
    return build_domain(DomainConfig(**SMALL, seed=1))


@pytest.fixture(scope="module")
def grid64():
    # attributes and sampling only need the grid; keep the series short
    return build_domain(DomainConfig(seed=0, n_warmup_days=5, n_train_days=10, n_test_days=5))


def test_same_seed_same_bytes(small_domain):
    again = build_domain(DomainConfig(**SMALL, seed=1))
    for name in ("attributes", "forcing", "true_raw", "truth"):
        assert getattr(small_domain, name).tobytes() == getattr(again, name).tobytes()
    assert np.array_equal(small_domain.obs, again.obs, equal_nan=True)
    other = build_domain(DomainConfig(**SMALL, seed=2))
    assert not np.array_equal(other.attributes, small_domain.attributes)


def test_zero_noise_obs_equal_truth():
    d = build_domain(DomainConfig(**SMALL, seed=1, noise_frac=0.0))
    w = d.config.n_warmup_days
    assert np.array_equal(d.obs[w:], d.truth[w:])
    assert np.isnan(d.obs[:w]).all()


def test_noise_level(small_domain):
    d = small_domain
    w = d.config.n_warmup_days
    resid = d.obs[w:] - d.truth[w:]
    assert abs(resid.std() / d.noise_sigma - 1.0) < 0.02
    assert abs(d.noise_sigma / d.truth[w:].std() - 0.05) < 1e-12


def test_attributes_autocorrelated(grid64):
    assert adjacent_correlation(grid64).min() > 0.5


def test_truth_params_in_bounds_and_transfer_closed_form(small_domain):
    d = small_domain
    assert d.true_raw.min() >= 0.1 and d.true_raw.max() <= 0.9
    tr = d.transfer
    for j, term in enumerate(tr["terms"]):
        z = d.attributes[:, term["attrs"]] @ np.asarray(term["coef"])
        expect = tr["lo"] + (tr["hi"] - tr["lo"]) / (1.0 + np.exp(-tr["gain"] * z))
        np.testing.assert_allclose(d.true_raw[:, j], expect, rtol=0, atol=1e-12)
        assert 2 <= len(term["attrs"]) <= 3


def test_grid_must_be_multiple_of_16():
    with pytest.raises(DataError):
        build_domain(DomainConfig(rows=40, cols=32))


def test_unknown_config_key():
    with pytest.raises(DataError):
        DomainConfig.from_dict({"rows": 32, "colz": 32})


@pytest.mark.parametrize("density,count", [("s4", 256), ("s8", 64), ("s16", 16)])
def test_patch_counts(grid64, density, count):
    cells = sample_patches(grid64, density, seed=3)
    assert len(cells) == count
    p = int(density[1:])
    patches = {(r // p, c // p) for r, c in map(grid64.cell_rc, cells)}
    assert len(patches) == count
    assert cells == sample_patches(grid64, density, seed=3)


def test_patch_sampling_nested(grid64):
    s16, s8, s4 = (set(sample_patches(grid64, d, seed=5)) for d in ("s16", "s8", "s4"))
    assert s16 <= s8 <= s4


def test_patch_sampling_uniform_within_patch(grid64):
    # each position inside the 8x8 patch should come up about equally often
    counts = np.zeros((8, 8))
    for seed in range(200):
        for r, c in map(grid64.cell_rc, sample_patches(grid64, "s8", seed)):
            counts[r % 8, c % 8] += 1
    expected = counts.sum() / 64
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 110  # 63 dof; 99.9th percentile is about 103


def test_unknown_density(grid64):
    with pytest.raises(DataError):
        sample_patches(grid64, "s5", 0)


def test_neighbor_of():
    assert neighbor_of((10, 10)) == (7, 13)
    assert neighbor_of((1, 5)) is None
    assert neighbor_of((10, 62), 64, 64) is None


def test_neighbor_pairs_skip_training_and_offgrid(grid64):
    train = sample_patches(grid64, "s8", 0)
    pairs = neighbor_pairs(grid64, train)
    ts = set(train)
    for a, b in pairs:
        assert b not in ts
        ra, ca = grid64.cell_rc(a)
        assert grid64.cell_rc(b) == (ra - 3, ca + 3)
    assert 0 < len(pairs) <= len(train)


def test_folds():
    folds = make_folds(100, 10, seed=0)
    assert np.all(np.bincount(folds) == 10)
    seen = np.concatenate([test for _, _, test in fold_rotations(folds)])
    assert sorted(seen.tolist()) == list(range(100))
    for _, train, test in fold_rotations(folds):
        assert len(train) == 90 and not set(train) & set(test)
    assert np.array_equal(folds, make_folds(100, 10, seed=0))
    sizes = np.bincount(make_folds(103, 10, seed=1))
    assert sizes.max() - sizes.min() <= 1


def test_subsample():
    items = list(range(500))
    assert subsample_training(items, 1.0, 0) == items
    assert len(subsample_training(items, 0.02, 0)) == 10
    assert subsample_training(items, 0.1, 4) == subsample_training(items, 0.1, 4)
    prev = set()
    for frac in (0.02, 0.05, 0.1, 0.25, 0.5, 1.0):
        cur = set(subsample_training(items, frac, 7, nested=True))
        assert prev <= cur
        prev = cur


def _toy_set(n_days=5, nan_attr=False):
    dates = [f"2001-01-0{d + 1}" for d in range(n_days)]
    rng = np.random.default_rng(0)
    basins = []
    for k in range(2):
        a = rng.normal(size=3)
        if nan_attr and k == 1:
            a[0] = np.nan
        basins.append(BasinRecord(f"g{k}", a, rng.uniform(0, 5, size=(n_days, 3)), rng.uniform(0, 2, n_days)))
    return BasinSet(basins, ["area", "slope", "aridity"], dates)


def test_csv_round_trip(tmp_path):
    bs = _toy_set()
    write_basin_csv(bs, tmp_path)
    back = load_basin_csv(tmp_path)
    assert back.ids == ["g0", "g1"] and back.dates == bs.dates
    for a, b in zip(bs.basins, back.basins):
        assert a.forcing.tobytes() == b.forcing.tobytes() and a.q.tobytes() == b.q.tobytes()


def test_csv_dates_intersected(tmp_path):
    write_basin_csv(_toy_set(), tmp_path)
    qp = tmp_path / "q_g1.csv"
    lines = qp.read_text().splitlines()
    qp.write_text("\n".join(lines[:1] + lines[2:]) + "\n")  # drop the first date of one basin
    back = load_basin_csv(tmp_path)
    assert back.dates == [f"2001-01-0{d}" for d in range(2, 6)]
    assert back.basins[0].forcing.shape == (4, 3)


def test_csv_nan_attribute_is_flagged(tmp_path):
    write_basin_csv(_toy_set(nan_attr=True), tmp_path)
    back = load_basin_csv(tmp_path)
    assert [b.flagged for b in back.basins] == [False, True]
    assert back.usable() == [0]
    imputed = load_basin_csv(tmp_path, impute=True)
    assert imputed.usable() == [0, 1]
    assert imputed.basins[1].attributes[0] == imputed.basins[0].attributes[0]


def test_csv_errors(tmp_path):
    write_basin_csv(_toy_set(), tmp_path)
    (tmp_path / "q_g1.csv").unlink()
    with pytest.raises(DataError, match="g1"):
        load_basin_csv(tmp_path)

    d2 = tmp_path / "dup"
    write_basin_csv(_toy_set(), d2)
    text = (d2 / "attributes.csv").read_text().splitlines()
    (d2 / "attributes.csv").write_text("\n".join(text + [text[1]]) + "\n")
    with pytest.raises(DataError, match="duplicate"):
        load_basin_csv(d2)

    d3 = tmp_path / "bad"
    write_basin_csv(_toy_set(), d3)
    (d3 / "forcing_g0.csv").write_text("date,precip_mm,temp_c,pet_mm\n2001-01-01,1.0,abc,2.0\n")
    with pytest.raises(DataError):
        load_basin_csv(d3)

    d4 = tmp_path / "disjoint"
    write_basin_csv(_toy_set(), d4)
    (d4 / "q_g0.csv").write_text("date,q_mm\n1999-01-01,1.0\n")
    with pytest.raises(DataError, match="intersect"):
        load_basin_csv(d4)


def test_domain_persistence_regenerates_exactly(tmp_path, small_domain):
    save_domain(small_domain, tmp_path, write_cells=False)
    back = load_domain(tmp_path)
    assert back.obs.tobytes() == small_domain.obs.tobytes()
    assert back.true_raw.tobytes() == small_domain.true_raw.tobytes()
    first = (tmp_path / "truth_params.csv").read_bytes()
    save_domain(back, tmp_path, write_cells=False)
    assert (tmp_path / "truth_params.csv").read_bytes() == first


def test_generate_basins_small():
    bs = generate_basins(n=20, seed=0, n_days=100, grid=16)
    assert len(bs) == 20 and len(set(bs.ids)) == 20
    attrs, forcing, q = bs.arrays(range(20))
    assert attrs.shape == (20, 6) and forcing.shape[1:] == (20, 3)
    assert np.isfinite(q[-100:]).all()
