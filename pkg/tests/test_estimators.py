import csv
import math

import numpy as np
import pytest

import wf_oracle as oracle
from robustarb.errors import DomainError, UsageError
from robustarb.estimators import (
    estimate_Phi_hat,
    estimate_u_M,
    estimate_u_M_profile,
    dpp_diagnostic,
    fit_grid_function,
    martingale_diagnostic,
    supersolution_drift_diagnostic,
    vsm_explicit_u,
    write_reports_csv,
)
from robustarb.grid import GridFunction, SpatialGrid
from robustarb.models import (
    constant_field,
    gvsm_field,
    singleton_uncertainty,
    vsm_field,
    vsm_uncertainty,
)
from robustarb.sde import SimConfig

from test_sde import wavy_field

FAMILIES = [vsm_field(2, 1.0, 1.0), vsm_field(3, 0.5, 2.0), gvsm_field(2, 0.7, [0.5, 1.0, 1.2]),
            constant_field([[0.3, 0.0], [0.1, 0.2]], [0.1, 0.2]), wavy_field()]


@pytest.mark.parametrize("f", FAMILIES, ids=lambda f: f"{f.family}{f.n}")
def test_zero_horizon_is_exactly_one(f):
    rng = np.random.default_rng(0)
    for x in np.exp(rng.normal(size=(10, f.n))):
        r = estimate_u_M(f, 0.0, x, SimConfig(T=1.0, steps=1, n_paths=10, seed=0))
        assert r.estimate == 1.0 and r.se == 0.0


def test_negative_horizon_rejected():
    with pytest.raises(UsageError):
        estimate_u_M(vsm_field(2, 1, 1), -1.0, [1.0, 1.0], SimConfig(T=1.0, steps=1, n_paths=10, seed=0))


@pytest.mark.parametrize("f", [constant_field([[0.4]], [0.7]), wavy_field(), vsm_field(1, 1.0, 1.0)],
                         ids=["constant", "wavy", "vsm"])
def test_single_asset_arbitrage_function_is_one(f):
    r = estimate_u_M(f, 1.0, [3.0], SimConfig(T=1.0, steps=20, n_paths=20000, seed=2))
    assert abs(r.estimate - 1.0) <= 3 * r.se + 1e-12
    assert r.n_aborted == 0 and r.n_localized == 0


def test_two_asset_vsm_matches_localized_oracle():
    r = estimate_u_M(vsm_field(2, 1.0, 1.0), 0.5, [1.0, 1.0],
                     SimConfig(T=0.5, steps=25, n_paths=40000, seed=3))
    assert abs(r.estimate - oracle.U_LOC_THALF_HALF) <= 3 * r.se
    assert r.estimate < 1 - 3 * r.se
    assert not r.flagged


def test_localized_oracle_is_consistent():
    assert oracle.survival(0.5, 0.5) == pytest.approx(oracle.U_THALF_HALF, abs=1e-6)
    loc = oracle.survival_fd(0.5, 0.5, eps=oracle.WEIGHT_FLOOR, nt=1000)
    assert loc == pytest.approx(oracle.U_LOC_THALF_HALF, abs=2e-4)
    assert oracle.U_LOC_THALF_HALF < oracle.U_THALF_HALF


def test_scale_invariance():
    f = vsm_field(2, 1.0, 1.0)
    cfg = SimConfig(T=0.25, steps=10, n_paths=4000, seed=4)
    base = estimate_u_M(f, 0.25, [1.0, 3.0], cfg)
    for c in (0.5, 2.0, 10.0):
        r = estimate_u_M(f, 0.25, [c, 3.0 * c], cfg)
        assert abs(r.estimate - base.estimate) <= 3 * math.hypot(r.se, base.se)


def test_time_monotonicity():
    f = vsm_field(2, 1.0, 1.0)
    vals = [estimate_u_M(f, T, [1.0, 1.0], SimConfig(T=T, steps=int(40 * T), n_paths=4000, seed=5))
            for T in (0.125, 0.25, 0.5)]
    for a, b in zip(vals, vals[1:]):
        assert b.estimate <= a.estimate + 3 * math.hypot(a.se, b.se)


def test_estimates_respect_ordering():
    r = estimate_u_M(vsm_field(2, 1.0, 1.0), 0.25, [1.0, 2.0], SimConfig(T=0.25, steps=10, n_paths=4000, seed=6))
    assert 0 < r.estimate <= 1 + 3 * r.se


def test_profile_starts_at_one_and_decreases():
    f = vsm_field(2, 1.0, 1.0)
    prof = estimate_u_M_profile(f, np.array([[1.0, 1.0], [1.0, 4.0]]), 0.25,
                                SimConfig(T=0.25, steps=5, n_paths=1, seed=7), 2000)
    # rows are mesh times, columns are states
    assert prof.values.shape == (6, 2)
    np.testing.assert_array_equal(prof.values[0], 1.0)
    assert np.all(prof.values[-1] < 1.0)
    assert prof.values[-1, 1] < prof.values[-1, 0]


# --- Phi_hat ---------------------------------------------------------------------

def test_phi_hat_singleton_equals_u_M():
    f = vsm_field(2, 1.0, 1.0)
    cfg = SimConfig(T=0.25, steps=10, n_paths=2000, seed=8)
    direct = estimate_u_M(f, 0.25, [1.0, 2.0], cfg)
    ph = estimate_Phi_hat(singleton_uncertainty(f), 0.25, [1.0, 2.0], cfg, param_grid=[{}])
    assert ph.best.estimate == direct.estimate and ph.best.se == direct.se
    ph2 = estimate_Phi_hat(vsm_uncertainty(2, 1.0, 1.0, 1.0), 0.25, [1.0, 2.0], cfg)
    assert ph2.best.estimate == direct.estimate


def test_phi_hat_dominates_constituents_and_grows_with_uncertainty():
    cfg = SimConfig(T=0.25, steps=10, n_paths=2000, seed=9)
    grids = {1.0: [1.0], 2.0: [1.0, 1.5, 2.0], 4.0: [1.0, 1.5, 2.0, 3.0, 4.0]}
    best = []
    for c2, g2s in grids.items():
        us = vsm_uncertainty(2, 1.0, 1.0, c2)
        ph = estimate_Phi_hat(us, 0.25, [1.0, 2.0], cfg, param_grid=[{"gamma1": 1.0, "gamma2": g} for g in g2s])
        assert all(ph.best.estimate >= e.estimate for e in ph.estimates)
        best.append(ph.best.estimate)
    assert best[0] <= best[1] <= best[2]


def test_phi_hat_empty_grid():
    with pytest.raises(UsageError):
        estimate_Phi_hat(vsm_uncertainty(2, 1, 1, 2), 0.25, [1.0, 1.0],
                         SimConfig(T=1.0, steps=1, n_paths=2, seed=0), param_grid=[])


# --- nested diagnostics -----------------------------------------------------------

def test_martingale_diagnostic_single_asset():
    f = wavy_field()
    g = SpatialGrid(1, 0.05, 20.0, 9)
    rep = martingale_diagnostic(f, 1.0, [1.0], SimConfig(T=1.0, steps=8, n_paths=4000, seed=10),
                                [0.0, 0.25, 0.5], inner_grid=g, inner_paths=200)
    assert rep.passed
    for row in rep.rows:
        assert row.mean == pytest.approx(1.0, abs=5 * max(row.se, 1e-3))


def test_martingale_diagnostic_budget_gives_partial_report():
    rep = martingale_diagnostic(vsm_field(2, 1, 1), 1.0, [1.0, 1.0], SimConfig(T=1.0, steps=8, n_paths=10, seed=0),
                                [0.0], inner_grid=SpatialGrid(2, 0.2, 5.0, 9), inner_paths=100, budget=10)
    assert rep.partial and not rep.passed


def test_martingale_checkpoint_zero_is_definition():
    f = vsm_field(2, 1.0, 1.0)
    g = SpatialGrid(2, 0.2, 5.0, 5)
    cfg = SimConfig(T=0.25, steps=4, n_paths=500, seed=11)
    inner = fit_grid_function(f, g, 0.25, cfg, 200)
    rep = martingale_diagnostic(f, 0.25, [1.0, 1.0], cfg, [0.0], inner=inner)
    assert rep.rows[0].mean == pytest.approx(2.0 * float(inner(0.25, np.array([1.0, 1.0]))), rel=1e-15)


def test_dpp_singleton_reduces_to_martingale():
    f = vsm_field(2, 1.0, 1.0)
    g = SpatialGrid(2, 0.2, 5.0, 5)
    cfg = SimConfig(T=0.25, steps=4, n_paths=500, seed=12)
    inner = fit_grid_function(f, g, 0.25, cfg, 200)
    mart = martingale_diagnostic(f, 0.25, [1.0, 1.0], cfg, [0.125], inner=inner)
    dpp = dpp_diagnostic(singleton_uncertainty(f), 0.25, [1.0, 1.0], cfg, 0.125, inner=inner)
    assert dpp.rows[0] == mart.rows[0]


def test_dpp_rejects_bad_tau():
    with pytest.raises(UsageError):
        dpp_diagnostic(singleton_uncertainty(vsm_field(2, 1, 1)), 1.0, [1.0, 1.0],
                       SimConfig(T=1.0, steps=4, n_paths=4, seed=0), 1.0, inner_grid=SpatialGrid(2, 0.5, 2, 3))


def test_unit_function_drift_is_flat_for_one_asset():
    rep = supersolution_drift_diagnostic(wavy_field(), 1.0, 1.0, [2.0], SimConfig(T=1.0, steps=10, n_paths=4000, seed=13))
    assert rep.passed and rep.flat


def test_unit_function_drift_is_nonincreasing_for_vsm():
    rep = supersolution_drift_diagnostic(vsm_field(2, 1.0, 1.0), 1.0, 0.5, [1.0, 1.0],
                                         SimConfig(T=0.5, steps=10, n_paths=4000, seed=14))
    assert rep.passed
    assert rep.means[-1] < rep.means[0]


def test_drift_rejects_nonpositive_function():
    g = SpatialGrid(2, 0.2, 5.0, 3)
    U = GridFunction(g, np.array([0.0, 1.0]), np.stack([np.ones(g.shape), -np.ones(g.shape)]))
    with pytest.raises(DomainError):
        supersolution_drift_diagnostic(vsm_field(2, 1, 1), U, 1.0, [1.0, 1.0], SimConfig(T=1.0, steps=2, n_paths=10, seed=0))
    with pytest.raises(DomainError):
        supersolution_drift_diagnostic(vsm_field(2, 1, 1), 0.0, 1.0, [1.0, 1.0], SimConfig(T=1.0, steps=2, n_paths=10, seed=0))


# --- product-ratio formula --------------------------------------------------------

def test_explicit_formula_single_asset():
    cmp = vsm_explicit_u(1.0, [2.0], 1.0, 1.0, SimConfig(T=1.0, steps=5, n_paths=500, seed=15))
    assert cmp.displayed == pytest.approx(1.0) and cmp.reciprocal == pytest.approx(1.0)


def test_explicit_formula_reciprocal_matches_definition():
    cmp = vsm_explicit_u(0.5, [1.0, 1.0], 1.0, 1.0, SimConfig(T=0.5, steps=10, n_paths=4000, seed=16))
    assert cmp.reciprocal == pytest.approx(cmp.definition.estimate, rel=1e-9)
    assert cmp.reciprocal_agrees
    assert not cmp.displayed_agrees


def test_explicit_formula_zero_horizon_flags_mismatch():
    cmp = vsm_explicit_u(0.0, [1.0, 1.0], 1.0, 1.0, SimConfig(T=1.0, steps=1, n_paths=2, seed=0))
    assert cmp.definition.estimate == 1.0 and cmp.reciprocal == 1.0
    assert cmp.displayed == 0.25 and not cmp.displayed_agrees and cmp.note


# --- serialization ---------------------------------------------------------------

def test_reports_csv(tmp_path):
    r = estimate_u_M(vsm_field(2, 1.0, 1.0), 0.1, [1.0, 2.0], SimConfig(T=0.1, steps=2, n_paths=100, seed=17))
    path = tmp_path / "r.csv"
    write_reports_csv([r, r], path)
    rows = list(csv.DictReader(open(path, encoding="utf-8")))
    assert len(rows) == 2
    assert float(rows[0]["estimate"]) == r.estimate
    assert rows[0]["seed"] == "17" and rows[0]["x"] == "[1.0,2.0]"
