import math

import numpy as np
import pytest

from robustarb.errors import ConfigurationError, DomainError, SimulationAbort, UsageError
from robustarb.models import CoefficientField, constant_field, vsm_field
from robustarb.sde import (
    InvestmentRule,
    SimConfig,
    constant_rule,
    market_portfolio,
    market_weights,
    simulate,
    wealth_path,
    write_bundle_csv,
)


def wavy_field():
    """A bounded, state-dependent one-asset field."""
    return CoefficientField(
        1,
        volatility=lambda y: 0.3 + 0.2 * np.sin(np.log(y)),
        risk=lambda y: 0.5 * np.cos(np.log(y)),
        diagonal=True,
        family="wavy",
    )


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SimConfig(T=0.0, steps=1, n_paths=1, seed=0)
    with pytest.raises(ConfigurationError):
        SimConfig(T=1.0, steps=0, n_paths=1, seed=0)
    with pytest.raises(ConfigurationError):
        SimConfig(T=1.0, steps=1, n_paths=1, seed=0, scheme="milstein")
    with pytest.raises(ConfigurationError):
        SimConfig(T=1.0, steps=1, n_paths=1, seed=0, coarsen=0)
    cfg = SimConfig(T=2.0, steps=4, n_paths=1, seed=0)
    assert cfg.dt == 0.5
    np.testing.assert_allclose(cfg.times, [0, 0.5, 1.0, 1.5, 2.0])


@pytest.mark.parametrize("x", [[0.0, 1.0], [1.0], [-1.0, 2.0]])
def test_simulate_rejects_bad_initial_state(x):
    with pytest.raises(DomainError):
        simulate(vsm_field(2, 1, 1), np.array(x), SimConfig(T=1.0, steps=2, n_paths=4, seed=0))


def test_bundle_initial_values_and_positivity():
    x = np.array([1.0, 3.0])
    bd = simulate(vsm_field(2, 1.0, 1.0), x, SimConfig(T=1.0, steps=10, n_paths=500, seed=3))
    np.testing.assert_array_equal(bd.X[:, 0], np.broadcast_to(x, (500, 2)))
    assert np.all(bd.logL[:, 0] == 0.0)
    assert np.all(bd.X > 0) and np.all(np.isfinite(bd.logL))
    assert bd.dW.shape == (500, 10, 2)
    assert bd.n_aborted == 0


@pytest.mark.parametrize("field_", [constant_field([[0.4]], [0.7]), wavy_field(), vsm_field(1, 1.0, 1.0)],
                         ids=["constant", "wavy", "vsm"])
def test_single_asset_deflated_capitalization_has_constant_mean(field_):
    x = np.array([2.0])
    bd = simulate(field_, x, SimConfig(T=1.0, steps=20, n_paths=20000, seed=11))
    v = np.exp(bd.logL[:, -1]) * bd.X[:, -1, 0]
    se = v.std(ddof=1) / math.sqrt(v.size)
    # for the VSM sigma = theta, so L X is constant up to rounding and se ~ 0
    assert abs(v.mean() - 2.0) <= 3 * se + 1e-12


@pytest.mark.parametrize("n,g1,g2,T", [(2, 1.0, 1.0, 1.0), (2, 0.5, 2.0, 0.5), (3, 1.0, 1.0, 1.0)])
def test_total_capitalization_growth(n, g1, g2, T):
    x = np.arange(1.0, n + 1.0)
    bd = simulate(vsm_field(n, g1, g2), x, SimConfig(T=T, steps=20, n_paths=5000, seed=5, max_log_var=0.1))
    tot = bd.total()[:, -1]
    se = tot.std(ddof=1) / math.sqrt(tot.size)
    assert abs(tot.mean() - x.sum() * math.exp(n * g1 * g2 * g2 * T)) <= 3 * se


def test_total_capitalization_log_is_gaussian():
    # log of the total is Brownian with drift (n g1 - 1/2) g2^2 and volatility g2
    n, g1, g2, T = 2, 1.0, 1.5, 0.5
    x = np.array([1.0, 1.0])
    bd = simulate(vsm_field(n, g1, g2), x, SimConfig(T=T, steps=10, n_paths=20000, seed=9, max_log_var=0.04))
    lt = np.log(bd.total()[:, -1] / 2.0)
    mean, var = (n * g1 - 0.5) * g2 ** 2 * T, g2 ** 2 * T
    assert abs(lt.mean() - mean) <= 3 * math.sqrt(var / lt.size)
    assert abs(lt.var(ddof=1) / var - 1.0) <= 3 * math.sqrt(2.0 / (lt.size - 1))


def test_strong_convergence_under_brownian_refinement():
    f = vsm_field(2, 1.0, 1.0)
    x = np.array([1.0, 2.0])
    base = dict(T=0.25, n_paths=2000, seed=21, max_log_var=None)
    ref = simulate(f, x, SimConfig(steps=64, coarsen=1, **base)).X[:, -1]
    errs = []
    for steps in (8, 16, 32):
        X = simulate(f, x, SimConfig(steps=steps, coarsen=64 // steps, **base)).X[:, -1]
        errs.append(float(np.mean(np.abs(np.log(X / ref)))))
    assert errs[0] > errs[1] > errs[2]
    order = math.log2(errs[0] / errs[2]) / 2
    assert order >= 0.5


def test_coarsened_run_sees_the_same_brownian_path():
    f = vsm_field(2, 1.0, 1.0)
    x = np.array([1.0, 1.0])
    fine = simulate(f, x, SimConfig(T=1.0, steps=8, n_paths=64, seed=4))
    coarse = simulate(f, x, SimConfig(T=1.0, steps=4, n_paths=64, seed=4, coarsen=2))
    np.testing.assert_allclose(coarse.dW, fine.dW[:, 0::2] + fine.dW[:, 1::2], rtol=1e-12, atol=1e-15)


def test_substeps_keep_recorded_increment():
    f = vsm_field(2, 1.0, 1.0)
    x = np.array([1.0, 1.0])
    plain = simulate(f, x, SimConfig(T=1.0, steps=5, n_paths=100, seed=8, max_log_var=None))
    fine = simulate(f, x, SimConfig(T=1.0, steps=5, n_paths=100, seed=8, max_log_var=0.01))
    np.testing.assert_array_equal(plain.dW, fine.dW)
    assert np.all(fine.substeps > plain.substeps)


def test_determinism_and_worker_independence():
    f = vsm_field(2, 1.0, 1.0)
    x = np.array([1.0, 2.0])
    cfg = SimConfig(T=1.0, steps=10, n_paths=300, seed=7, block_size=64)
    a = simulate(f, x, cfg)
    b = simulate(f, x, cfg.with_(workers=4))
    for name in ("X", "dW", "logL", "min_weight", "abort_step", "substeps"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = simulate(f, x, cfg.with_(seed=8))
    assert not np.array_equal(a.X, c.X)


def test_blocks_use_independent_streams():
    cfg = SimConfig(T=1.0, steps=1, n_paths=256, seed=1, block_size=128)
    bd = simulate(constant_field([[1.0]], [0.0]), np.array([1.0]), cfg)
    z = bd.dW[:, 0, 0]
    assert not np.allclose(z[:128], z[128:])
    assert abs(np.corrcoef(z[:128], z[128:])[0, 1]) < 0.3


def test_antithetic_pairs():
    cfg = SimConfig(T=1.0, steps=3, n_paths=64, seed=1, block_size=64, antithetic=True)
    bd = simulate(constant_field([[1.0]], [0.0]), np.array([1.0]), cfg)
    np.testing.assert_array_equal(bd.dW[:32], -bd.dW[32:])


def test_nonfinite_coefficients_abort_with_state():
    bad = CoefficientField(1, volatility=lambda y: np.where(y > 1.5, np.nan, 0.5),
                           risk=lambda y: np.zeros_like(y), diagonal=True)
    with pytest.raises(SimulationAbort) as info:
        simulate(bad, np.array([1.0]), SimConfig(T=10.0, steps=50, n_paths=100, seed=0))
    assert info.value.state["states"]


def test_hard_cap_aborts_are_counted():
    wild = constant_field([[3.0]], [0.0])
    bd = simulate(wild, np.array([1.0]), SimConfig(T=1.0, steps=1, n_paths=1000, seed=0,
                                                   max_log_var=None, hard_cap=5.0))
    assert 0 < bd.n_aborted < 1000
    assert np.all(bd.X > 0)


# --- market weights and wealth --------------------------------------------------

def test_market_weights():
    bd = simulate(vsm_field(2, 1, 1), np.array([2.0, 3.0]), SimConfig(T=1.0, steps=5, n_paths=50, seed=0))
    mu = market_weights(bd)
    np.testing.assert_allclose(mu[:, 0], np.broadcast_to([0.4, 0.6], (50, 2)))
    np.testing.assert_allclose(mu.sum(-1), 1.0, rtol=0, atol=1e-15)
    one = simulate(vsm_field(1, 1, 1), np.array([2.0]), SimConfig(T=1.0, steps=5, n_paths=5, seed=0))
    assert np.all(market_weights(one) == 1.0)


def test_market_portfolio_tracks_total_capitalization():
    x = np.array([1.0, 2.0, 3.0])
    bd = simulate(vsm_field(3, 1.0, 1.0), x, SimConfig(T=1.0, steps=20, n_paths=200, seed=2))
    logZ = wealth_path(bd, market_portfolio(), 6.0)
    np.testing.assert_allclose(np.exp(logZ), bd.total(), rtol=1e-12)


def test_cash_keeps_wealth_constant():
    bd = simulate(vsm_field(2, 1.0, 1.0), np.array([1.0, 1.0]), SimConfig(T=1.0, steps=10, n_paths=50, seed=2))
    logZ = wealth_path(bd, constant_rule([0.0, 0.0]), 3.0)
    assert np.all(logZ == math.log(3.0))


def test_single_asset_full_investment_replicates_asset():
    bd = simulate(wavy_field(), np.array([2.0]), SimConfig(T=1.0, steps=10, n_paths=50, seed=2))
    Z = np.exp(wealth_path(bd, constant_rule([1.0]), 5.0))
    np.testing.assert_allclose(Z / 5.0, bd.X[:, :, 0] / 2.0, rtol=1e-12)


def test_wealth_is_linear_in_initial_capital():
    bd = simulate(vsm_field(2, 1.0, 1.0), np.array([1.0, 1.0]), SimConfig(T=1.0, steps=10, n_paths=50, seed=2))
    rule = constant_rule([0.7, 0.6])
    np.testing.assert_allclose(wealth_path(bd, rule, 2.0) - wealth_path(bd, rule, 1.0), math.log(2.0),
                               rtol=0, atol=1e-12)


def test_deflated_wealth_is_supermartingale():
    f = vsm_field(2, 1.0, 1.0)
    bd = simulate(f, np.array([1.0, 1.0]), SimConfig(T=1.0, steps=8, n_paths=20000, seed=6, max_log_var=0.04))
    logZ = wealth_path(bd, constant_rule([0.5, 0.3]), 1.0)
    lz = np.exp(bd.logL + logZ)
    means = lz.mean(0)
    se = lz.std(0, ddof=1) / math.sqrt(lz.shape[0])
    for k in range(1, means.size):
        assert means[k] <= means[k - 1] + 3 * math.hypot(se[k], se[k - 1])


def test_wealth_rejects_bad_inputs():
    bd = simulate(vsm_field(2, 1.0, 1.0), np.array([1.0, 1.0]), SimConfig(T=1.0, steps=2, n_paths=4, seed=2))
    with pytest.raises(UsageError):
        wealth_path(bd, market_portfolio(), 0.0)
    nan_rule = InvestmentRule(lambda t, y: np.full(y.shape, np.nan))
    with pytest.raises(SimulationAbort):
        wealth_path(bd, nan_rule, 1.0)


def test_rule_flags():
    y = np.array([[1.0, 2.0], [3.0, 1.0]])
    assert market_portfolio().check_flags(0.0, y)["consistent"]
    liar = InvestmentRule(lambda t, y: np.full(y.shape, 0.2), portfolio=True)
    assert not liar.check_flags(0.0, y)["consistent"]


# --- export ---------------------------------------------------------------------

def test_bundle_csv(tmp_path):
    bd = simulate(vsm_field(2, 1.0, 1.0), np.array([1.0, 2.0]), SimConfig(T=1.0, steps=3, n_paths=2, seed=1))
    bd = bd.with_wealth(wealth_path(bd, market_portfolio(), 3.0))
    path = tmp_path / "paths.csv"
    write_bundle_csv(bd, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode("utf-8").splitlines()
    assert lines[0] == "t,X_1,X_2,logL,logZ"
    assert len(lines) == 1 + 2 * 4
    first = lines[1].split(",")
    assert float(first[0]) == 0.0 and float(first[1]) == 1.0 and float(first[3]) == 0.0
    # path-major order: the second path starts after all mesh times of the first
    assert float(lines[5].split(",")[0]) == 0.0
    assert float(lines[4].split(",")[1]) == bd.X[0, 3, 0]
