"""Investment rules generated by a positive supersolution, and their backtests.

Given ``U(s, x) > 0`` (``s`` = time to maturity) the generated rule holds

    pi_i(t, y) = y_i D_i log U(T - t, y) + y_i / ||y||_1

in asset ``i``.  Started from ``v = U(T, x) ||x||_1`` it dominates the
market at ``T``.  Derivatives are centred differences, in log-coordinates,
of the multilinear interpolant of ``log U`` (one grid spacing each way,
one-sided on the faces of the box).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import DomainError, UsageError
from .grid import GridFunction
from .models import CoefficientField
from .sde import InvestmentRule, PathBundle, SimConfig, map_blocks, wealth_path


@dataclass(frozen=True)
class GeneratedRule:
    """The rule generated by ``source`` over the horizon ``T``."""

    source: GridFunction
    T: float
    log_source: GridFunction
    portfolio_defect: float
    portfolio_tol: float = 1e-2

    @property
    def is_portfolio(self) -> bool:
        return self.portfolio_defect <= self.portfolio_tol

    def log_gradient(self, t: float, y) -> np.ndarray:
        """``d log U / d log y_i`` at time-to-maturity ``T - t``, shape ``(..., n)``."""
        y = np.asarray(y, dtype=float)
        g = self.source.grid
        s = self.T - float(t)
        z = np.log(y)
        zlo, zhi = math.log(g.x_lo), math.log(g.x_hi)
        d = g.h
        out = np.empty(y.shape)
        for i in range(g.n):
            zi = np.clip(z[..., i], zlo, zhi)
            up = np.minimum(zi + d, zhi)
            dn = np.maximum(zi - d, zlo)
            zp, zm = z.copy(), z.copy()
            zp[..., i], zm[..., i] = up, dn
            fp = self.log_source(s, np.exp(zp))
            fm = self.log_source(s, np.exp(zm))
            out[..., i] = (fp - fm) / (up - dn)
        return out

    def __call__(self, t: float, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self.log_gradient(t, y) + y / np.sum(y, axis=-1, keepdims=True)

    def as_investment_rule(self) -> InvestmentRule:
        return InvestmentRule(self.__call__, bounded=True, portfolio=self.is_portfolio,
                              long_only=False, name="generated")


def rule_from_solution(U: GridFunction, T: float, portfolio_tol: float = 1e-2) -> GeneratedRule:
    """Build the generated rule; rejects non-positive ``U`` and too short time extents.

    ``portfolio_defect`` is the largest ``|sum_i d log U / d log x_i|`` over
    grid nodes and stored slices up to ``T``; it vanishes when ``U`` is
    scale-invariant, which is when the rule is fully invested.
    """
    if np.any(U.values <= 0):
        raise DomainError("U must be strictly positive on its grid to generate a rule")
    if T > U.T * (1 + 1e-12) or T <= 0:
        raise UsageError(f"horizon {T} must lie in (0, {U.T}]")
    logU = GridFunction(U.grid, U.times, np.log(U.values), None, {"kind": "log"})
    rule = GeneratedRule(U, float(T), logU, 0.0, portfolio_tol)
    pts = U.grid.points().reshape(-1, U.grid.n)
    defect = 0.0
    for s in U.times[U.times <= T]:
        defect = max(defect, float(np.max(np.abs(np.sum(rule.log_gradient(T - s, pts), axis=-1)))))
    return GeneratedRule(U, float(T), logU, defect, portfolio_tol)


@dataclass(frozen=True)
class BacktestReport:
    v: float
    eps: float
    steps: int
    n_paths: int
    n_excluded: int
    n_aborted: int
    success_rate: float
    shortfall_rate: float
    worst_shortfall: float
    mean_shortfall: float
    Z_T: np.ndarray
    X_T: np.ndarray
    included: np.ndarray
    seed: int

    @property
    def ratio(self) -> np.ndarray:
        return self.Z_T / self.X_T

    def summary(self) -> dict[str, Any]:
        keys = ("v", "eps", "steps", "n_paths", "n_excluded", "n_aborted", "success_rate",
                "shortfall_rate", "worst_shortfall", "mean_shortfall", "seed")
        return {k: getattr(self, k) for k in keys}

    def write_csv(self, path) -> None:
        """Per-path terminal wealth, capitalization, ratio and inclusion flag."""
        fmt = lambda v: format(float(v), ".17g")  # noqa: E731
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "Z_T", "X_T", "ratio", "included"])
            for p in range(self.Z_T.size):
                w.writerow([p, fmt(self.Z_T[p]), fmt(self.X_T[p]), fmt(self.ratio[p]), int(self.included[p])])


def backtest_superreplication(rule: GeneratedRule | InvestmentRule, field_: CoefficientField, T: float, x,
                              cfg: SimConfig, eps: float, v: float | None = None,
                              box=None) -> BacktestReport:
    """Simulate the market and the rule's wealth on shared randomness.

    ``v`` defaults to ``U(T, x) ||x||_1`` for a generated rule.  A path is
    excluded (and counted) when it aborts or leaves ``box`` (by default the
    generated rule's grid box) at any mesh time.  The shortfall of a path
    is ``max(0, 1 - Z(T) / X(T))``; ``success_rate`` is the fraction of
    included paths with shortfall at most ``eps``.
    """
    x = np.asarray(x, dtype=float)
    norm = float(np.sum(x))
    if isinstance(rule, GeneratedRule):
        if v is None:
            v = float(rule.source(T, x)) * norm
        if box is None:
            box = rule.source.grid
        inv = rule.as_investment_rule()
    else:
        if v is None:
            raise UsageError("initial wealth must be given for a plain investment rule")
        inv = rule
    sim = cfg.with_(T=float(T), freeze_weight=None)

    def reduce(bd: PathBundle, start: int):
        logZ = wealth_path(bd, inv, v)
        inside = np.ones(bd.n_paths, dtype=bool)
        if box is not None:
            inside = np.all(box.contains(bd.X), axis=-1)
        ok = bd.valid() & inside
        return np.exp(logZ[:, -1]), np.sum(bd.X[:, -1], axis=-1), ok, bd.n_aborted

    parts = map_blocks(field_, x, sim, reduce)
    Z = np.concatenate([p[0] for p in parts])
    X = np.concatenate([p[1] for p in parts])
    inc = np.concatenate([p[2] for p in parts])
    short = np.maximum(0.0, 1.0 - Z / X)[inc]
    nin = int(inc.sum())
    return BacktestReport(
        v=float(v), eps=float(eps), steps=sim.steps, n_paths=sim.n_paths, n_excluded=int((~inc).sum()),
        n_aborted=sum(p[3] for p in parts),
        success_rate=float(np.mean(short <= eps)) if nin else float("nan"),
        shortfall_rate=float(np.mean(short > eps)) if nin else float("nan"),
        worst_shortfall=float(np.max(short)) if nin else float("nan"),
        mean_shortfall=float(np.mean(short)) if nin else float("nan"),
        Z_T=Z, X_T=X, included=inc, seed=cfg.seed)


@dataclass(frozen=True)
class RefinementReport:
    coarse: BacktestReport
    fine: BacktestReport

    @property
    def shortfall_rate_decreased(self) -> bool:
        return self.fine.shortfall_rate <= self.coarse.shortfall_rate

    @property
    def mean_shortfall_decreased(self) -> bool:
        return self.fine.mean_shortfall < self.coarse.mean_shortfall or self.coarse.mean_shortfall == 0.0


def backtest_refinement(rule, field_: CoefficientField, T: float, x, cfg: SimConfig, eps: float,
                        v: float | None = None) -> RefinementReport:
    """Backtest at rebalancing step ``dt`` and ``dt / 2`` on the same Brownian path.

    The coarse run draws its increments on the fine mesh and sums pairs of
    them, so both runs see one Brownian motion.
    """
    coarse = backtest_superreplication(rule, field_, T, x, cfg.with_(coarsen=2 * cfg.coarsen), eps, v)
    fine = backtest_superreplication(rule, field_, T, x, cfg.with_(steps=2 * cfg.steps), eps, v)
    return RefinementReport(coarse, fine)


def relative_return_report(report: BacktestReport, norm: float | None = None,
                           quantiles: Sequence[float] = (0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 1.0)
                           ) -> dict[str, Any]:
    """Quantiles of ``Z(T) / X(T)`` over included paths.

    With ``norm = ||x||_1`` the report also rescales to one unit of the
    market (initial wealth ``||x||_1``): wealth is linear in ``v``, so the
    rescaled ratios are the observed ones times ``norm / v`` and their
    guaranteed floor is ``norm / v = 1 / U(T, x)``.
    """
    r = report.ratio[report.included]
    qs = np.quantile(r, quantiles) if r.size else np.full(len(quantiles), np.nan)
    out: dict[str, Any] = {"quantiles": dict(zip(map(float, quantiles), map(float, qs))),
                           "mean": float(np.mean(r)) if r.size else float("nan"),
                           "min_ok": bool(r.size and qs[0] >= 1.0 - report.eps),
                           "v": report.v, "eps": report.eps}
    if norm is not None:
        scale = norm / report.v
        out["unit_quantiles"] = {k: v * scale for k, v in out["quantiles"].items()}
        out["unit_floor"] = scale
    return out
