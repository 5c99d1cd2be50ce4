import itertools

import numpy as np
import pytest

from esmci import rng
from esmci.ensemble import (
    EnsembleModel,
    SubsampleDesign,
    draw_subsamples,
    ensemble_predict,
    fit_ensemble,
    mean_estimate,
    resolve_r,
)
from esmci.errors import ConfigError, DesignError, DomainError
from esmci.expfam import FamilySpec
from esmci.net import Network, NetworkConfig, forward

TINY = NetworkConfig(widths=(3, 8, 1), epochs=10)


def constant_net(value, p=3):
    cfg = NetworkConfig(widths=(p, 2, 1))
    return Network(cfg, [np.zeros((2, p)), np.zeros((1, 2))], [np.zeros(2), np.array([value])])


def model_from_nets(nets, spec=FamilySpec("bernoulli"), n=6, r=3):
    B = len(nets)
    design = draw_subsamples(n, r, B, rng.stream(0))
    return EnsembleModel(spec, design, nets, 0, nets[0].config)


# -- designs ------------------------------------------------------------------

def test_complete_design_n4_r2():
    d = draw_subsamples(4, 2, 0, enumerate_complete=True)
    assert d.complete and d.B == 6
    assert [tuple(row) for row in d.indices] == list(itertools.combinations(range(4), 2))


def test_complete_design_n3_r2():
    d = draw_subsamples(3, 2, 99, enumerate_complete=True)
    assert d.indices.tolist() == [[0, 1], [0, 2], [1, 2]]


def test_random_design_rows_and_inclusion_rate():
    n, r, B = 400, 163, 400
    d = draw_subsamples(n, r, B, rng.stream(1))
    assert d.indices.shape == (B, r)
    assert all(len(set(row)) == r for row in d.indices.tolist())
    J = d.membership()
    assert np.all(J.sum(axis=1) == r)
    freq = J.mean(axis=0)
    p = r / n
    se = np.sqrt(p * (1 - p) / B)
    assert abs(freq.mean() - p) < 1e-12  # row sums are exactly r
    assert np.mean(np.abs(freq - p) < 3 * se) > 0.99


def test_every_subset_equally_likely():
    counts = {}
    g = rng.stream(3)
    d = draw_subsamples(5, 2, 20000, g)
    for row in d.indices.tolist():
        counts[tuple(row)] = counts.get(tuple(row), 0) + 1
    assert len(counts) == 10
    expected = 2000
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 27.9  # 99.9% quantile with 9 degrees of freedom


def test_design_is_deterministic_and_allows_duplicates():
    a = draw_subsamples(4, 3, 50, rng.stream(7))
    b = draw_subsamples(4, 3, 50, rng.stream(7))
    assert a == b
    assert len({tuple(r) for r in a.indices.tolist()}) < 50


@pytest.mark.parametrize("n, r", [(5, 5), (5, 7), (5, 0)])
def test_bad_subsample_size(n, r):
    with pytest.raises(DesignError):
        draw_subsamples(n, r, 3, rng.stream(0))


def test_design_validation():
    with pytest.raises(DesignError):
        SubsampleDesign(4, 2, 1, np.array([[1, 1]]))
    with pytest.raises(DesignError):
        SubsampleDesign(4, 2, 1, np.array([[2, 1]]))
    with pytest.raises(DesignError):
        SubsampleDesign(4, 2, 1, np.array([[0, 4]]))


def test_resolve_r():
    assert resolve_r(400, gamma=0.85) == 163
    assert resolve_r(400, gamma=0.9) == 220
    assert resolve_r(10, gamma=0.01) == 2
    assert resolve_r(50, r=20) == 20
    with pytest.raises(ConfigError):
        resolve_r(50)
    with pytest.raises(ConfigError):
        resolve_r(50, r=3, gamma=0.5)
    with pytest.raises(DesignError):
        resolve_r(50, r=50)


# -- prediction ---------------------------------------------------------------

def test_mean_of_members():
    model = model_from_nets([constant_net(v) for v in (0.5, 1.0, 1.5)])
    fhat, per = ensemble_predict(model, np.zeros(3))
    assert fhat == 1.0
    assert per.tolist() == [0.5, 1.0, 1.5]


def test_identical_members():
    model = model_from_nets([constant_net(0.7)] * 4)
    fhat, per = ensemble_predict(model, np.ones(3))
    assert np.all(per == 0.7) and fhat == pytest.approx(0.7, abs=1e-15)


def test_mean_estimate_per_family():
    cases = [(FamilySpec("bernoulli"), 0.5), (FamilySpec("poisson"), 1.0), (FamilySpec("binomial", 5), 2.5)]
    for spec, expected in cases:
        model = model_from_nets([constant_net(0.0)] * 2, spec=spec)
        assert mean_estimate(model, np.zeros(3)) == expected


def test_union_prediction_is_weighted_mean():
    g = np.random.default_rng(0)
    X, y = g.normal(size=(30, 3)), g.integers(0, 2, 30)
    spec = FamilySpec("bernoulli")
    m = fit_ensemble(X, y, spec, TINY, r=12, B=7, master_seed=4)
    a = EnsembleModel(spec, SubsampleDesign(30, 12, 3, m.design.indices[:3]), m.networks[:3], 4, TINY)
    b = EnsembleModel(spec, SubsampleDesign(30, 12, 4, m.design.indices[3:]), m.networks[3:], 4, TINY)
    xs = g.normal(size=(5, 3))
    fa, _ = ensemble_predict(a, xs)
    fb, _ = ensemble_predict(b, xs)
    fu, per = ensemble_predict(m, xs)
    np.testing.assert_allclose(fu, (3 * fa + 4 * fb) / 7, rtol=0, atol=1e-15)
    assert np.all((per.min(axis=0) <= fu) & (fu <= per.max(axis=0)))
    assert np.all(np.abs(fu) <= TINY.clamp_F)


def test_predict_dimension_mismatch():
    model = model_from_nets([constant_net(0.0)] * 2)
    with pytest.raises(DomainError):
        ensemble_predict(model, np.zeros(4))


# -- fitting ------------------------------------------------------------------

def test_single_member_matches_its_network():
    g = np.random.default_rng(1)
    X, y = g.normal(size=(20, 3)), g.normal(size=20)
    m = fit_ensemble(X, y, FamilySpec("gaussian"), TINY, r=10, B=1, master_seed=2)
    x = g.normal(size=3)
    assert ensemble_predict(m, x)[0] == forward(m.networks[0], x)


def test_fit_is_deterministic_and_thread_independent():
    g = np.random.default_rng(2)
    X, y = g.normal(size=(40, 3)), g.poisson(1.0, 40)
    spec = FamilySpec("poisson")
    a = fit_ensemble(X, y, spec, TINY, r=15, B=9, master_seed=11, threads=1)
    b = fit_ensemble(X, y, spec, TINY, r=15, B=9, master_seed=11, threads=4)
    assert a.design == b.design
    assert np.array_equal(a.membership, b.membership)
    assert all(na == nb for na, nb in zip(a.networks, b.networks))
    xs = g.normal(size=(4, 3))
    assert np.array_equal(ensemble_predict(a, xs)[1], ensemble_predict(b, xs)[1])


def test_membership_matches_design():
    g = np.random.default_rng(3)
    m = fit_ensemble(g.normal(size=(25, 3)), g.integers(0, 2, 25), FamilySpec("bernoulli"), TINY,
                     r=9, B=6, master_seed=1)
    J = m.membership
    assert np.all(J.sum(axis=1) == 9)
    for j, row in enumerate(m.design.indices):
        assert set(np.flatnonzero(J[j])) == set(row)


def test_constant_gaussian_response_recovered():
    g = np.random.default_rng(4)
    X = g.normal(size=(60, 3))
    cfg = NetworkConfig(widths=(3, 16, 1), epochs=500)
    m = fit_ensemble(X, np.full(60, 1.3), FamilySpec("gaussian"), cfg, r=30, B=4, master_seed=5)
    fhat, _ = ensemble_predict(m, g.normal(size=(10, 3)))
    assert np.all(np.abs(fhat - 1.3) < 0.15)


def test_fit_rejects_bad_inputs():
    X = np.zeros((10, 3))
    with pytest.raises(ConfigError):
        fit_ensemble(np.zeros((10, 4)), np.zeros(10), FamilySpec("gaussian"), TINY, 5, 2, 0)
    with pytest.raises(DesignError):
        fit_ensemble(X, np.zeros(10), FamilySpec("gaussian"), TINY, 10, 2, 0)
    with pytest.raises(DomainError):
        fit_ensemble(X, np.zeros(9), FamilySpec("gaussian"), TINY, 5, 2, 0)


def test_standardize_switch():
    g = np.random.default_rng(5)
    X = g.normal(loc=50, scale=10, size=(30, 3))
    m = fit_ensemble(X, g.normal(size=30), FamilySpec("gaussian"), TINY, 10, 2, 0, standardize=True)
    np.testing.assert_allclose(m.center, X.mean(axis=0))
    assert np.all(np.isfinite(ensemble_predict(m, X)[0]))


def test_complete_ensemble_symmetric_in_row_order():
    # the complete U-statistic of a symmetric kernel ignores how rows are ordered
    g = np.random.default_rng(6)
    y = g.normal(size=6)
    d = draw_subsamples(6, 3, 0, enumerate_complete=True)
    perm = g.permutation(6)
    stat = np.mean([y[row].mean() for row in d.indices])
    stat_perm = np.mean([y[perm][row].mean() for row in d.indices])
    assert stat == pytest.approx(stat_perm, abs=1e-15)
