"""Monte-Carlo estimation of the arbitrage function and its diagnostics.

For a fixed model the arbitrage function is ``u_M(T, x) = E[L(T) X(T)] / ||x||_1``.
In continuous time ``L X`` is a strict local martingale under the
volatility-stabilized family, so its expectation falls below ``||x||_1``;
the shortfall is carried by paths on which some market weight is driven
towards zero.  A discrete-time scheme does not see this: the simulated
``L X`` is an exact martingale, because every (sub)step preserves its
conditional mean, and a plain sample mean converges to 1.

The estimators therefore localize: a path whose smallest market weight has
dropped below ``weight_floor`` at any time up to ``t`` contributes zero at
``t``.  This targets ``E[L X ; min weight > floor]``, which increases to
``u_M`` as the floor decreases.  Paths aborted by the simulator's hard cap
also contribute zero and are counted in every report.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, UsageError
from .grid import GridFunction, SpatialGrid, _jsonable
from .models import CoefficientField, UncertaintySet, vsm_field
from .sde import PathBundle, SimConfig, map_blocks

DEFAULT_WEIGHT_FLOOR = 1e-4


@dataclass(frozen=True)
class EstimateReport:
    """A Monte-Carlo estimate together with its provenance."""

    estimate: float
    se: float
    n_paths: int
    seed: int
    params: Mapping[str, float]
    T: float
    x: tuple[float, ...]
    label: str = "u_M"
    n_aborted: int = 0
    n_localized: int = 0
    weight_floor: float | None = None

    def ci(self, k: float = 3.0) -> tuple[float, float]:
        return self.estimate - k * self.se, self.estimate + k * self.se

    @property
    def flagged(self) -> bool:
        """True when the 3-SE interval misses ``(0, 1]`` entirely."""
        lo, hi = self.ci()
        return hi <= 0.0 or lo > 1.0

    def row(self) -> dict[str, Any]:
        out = {"label": self.label, "estimate": self.estimate, "se": self.se, "n_paths": self.n_paths,
               "seed": self.seed, "T": self.T, "x": list(self.x), "params": dict(self.params),
               "n_aborted": self.n_aborted, "n_localized": self.n_localized,
               "weight_floor": self.weight_floor, "flagged": self.flagged}
        return out


def _norm1(x) -> float:
    return float(np.sum(np.asarray(x, dtype=float)))


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    n = samples.size
    mean = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return mean, se


def _localized_cfg(cfg: SimConfig, T: float, floor: float | None) -> SimConfig:
    return cfg.with_(T=float(T), freeze_weight=floor)


def _kept(bd: PathBundle, k: int, floor: float | None) -> np.ndarray:
    ok = bd.abort_step > k
    if floor is not None:
        ok &= bd.min_weight[:, k] >= floor
    return ok


def _deflated_total(bd: PathBundle, k: int) -> np.ndarray:
    return np.exp(bd.logL[:, k]) * np.sum(bd.X[:, k], axis=-1)


def estimate_u_M(field_: CoefficientField, T: float, x, cfg: SimConfig,
                 weight_floor: float | None = DEFAULT_WEIGHT_FLOOR) -> EstimateReport:
    """Estimate ``u_M(T, x)`` for a single model.

    ``cfg.T`` is replaced by ``T``; ``cfg.steps`` keeps its meaning as the
    number of mesh intervals.  ``T = 0`` returns exactly 1.
    """
    x = np.asarray(x, dtype=float)
    if T < 0:
        raise UsageError(f"horizon must be nonnegative, got {T}")
    xs = tuple(float(v) for v in x)
    if T == 0:
        if x.shape != (field_.n,) or np.any(x <= 0):
            raise DomainError("initial configuration must lie in the open positive orthant")
        return EstimateReport(1.0, 0.0, 0, cfg.seed, dict(field_.params), 0.0, xs,
                              weight_floor=weight_floor)
    sim = _localized_cfg(cfg, T, weight_floor)
    m = sim.steps
    norm = _norm1(x)

    def reduce(bd: PathBundle, start: int):
        keep = _kept(bd, m, weight_floor)
        return (_deflated_total(bd, m) / norm * keep, bd.n_aborted, int(np.sum(bd.valid() & ~keep)))

    parts = map_blocks(field_, x, sim, reduce)
    samples = np.concatenate([p[0] for p in parts])
    mean, se = _mean_se(samples)
    return EstimateReport(mean, se, sim.n_paths, cfg.seed, dict(field_.params), float(T), xs,
                          n_aborted=sum(p[1] for p in parts), n_localized=sum(p[2] for p in parts),
                          weight_floor=weight_floor)


@dataclass(frozen=True)
class Profile:
    """``u_M(t_k, x_j)`` for all mesh times and a set of initial states."""

    times: np.ndarray
    values: np.ndarray  # (m+1, K)
    se: np.ndarray      # (m+1, K)
    paths_per_state: int


def estimate_u_M_profile(field_: CoefficientField, states, T: float, cfg: SimConfig,
                         paths_per_state: int,
                         weight_floor: float | None = DEFAULT_WEIGHT_FLOOR) -> Profile:
    """Estimate ``u_M(t_k, x_j)`` at every mesh time ``t_k <= T`` for each state ``x_j``.

    One simulation serves all times: by time-homogeneity the localized
    deflated total observed at ``t_k`` estimates ``u_M(t_k, x_j)``.
    """
    states = np.asarray(states, dtype=float).reshape(-1, field_.n)
    K, P = states.shape[0], int(paths_per_state)
    if P < 2:
        raise UsageError("need at least two paths per state")
    sim = _localized_cfg(cfg, T, weight_floor).with_(n_paths=K * P)
    m = sim.steps
    x0 = np.repeat(states, P, axis=0)
    norms = np.sum(x0, axis=-1)

    def reduce(bd: PathBundle, start: int):
        B = bd.n_paths
        node = (start + np.arange(B)) // P
        s = np.zeros((K, m + 1))
        q = np.zeros((K, m + 1))
        for k in range(m + 1):
            v = _deflated_total(bd, k) / norms[start:start + B] * _kept(bd, k, weight_floor)
            s[:, k] = np.bincount(node, weights=v, minlength=K)
            q[:, k] = np.bincount(node, weights=v * v, minlength=K)
        return s, q

    parts = map_blocks(field_, x0, sim, reduce)
    S = np.zeros((K, m + 1))
    Q = np.zeros((K, m + 1))
    for s, q in parts:
        S += s
        Q += q
    mean = S / P
    var = np.maximum(Q / P - mean * mean, 0.0) * P / (P - 1)
    mean[:, 0] = 1.0
    se = np.sqrt(var / P)
    se[:, 0] = 0.0
    return Profile(sim.times, mean.T, se.T, P)


@dataclass(frozen=True)
class PhiHatReport:
    best: EstimateReport
    argmax: Mapping[str, float]
    estimates: tuple[EstimateReport, ...]
    vertices: tuple[Mapping[str, float], ...]


def estimate_Phi_hat(uset: UncertaintySet, T: float, x, cfg: SimConfig,
                     param_grid: Sequence[Mapping[str, float]] | None = None,
                     points: int = 5,
                     weight_floor: float | None = DEFAULT_WEIGHT_FLOOR) -> PhiHatReport:
    """Maximize ``u_M`` over a finite parameter grid with common random numbers.

    Every vertex is simulated with the same seed.  Ties keep the first
    vertex in grid order.
    """
    grid = list(param_grid) if param_grid is not None else uset.param_grid(points)
    if not grid:
        raise UsageError("parameter grid is empty")
    ests = []
    for p in grid:
        f = uset.field_at(p) if p else uset.base
        r = estimate_u_M(f, T, x, cfg, weight_floor)
        ests.append(EstimateReport(**{**asdict(r), "params": dict(p), "label": "u_M"}))
    j = int(np.argmax([e.estimate for e in ests]))
    best = EstimateReport(**{**asdict(ests[j]), "label": "Phi_hat"})
    return PhiHatReport(best, dict(grid[j]), tuple(ests), tuple(dict(p) for p in grid))


def fit_grid_function(field_or_set, grid: SpatialGrid, T: float, cfg: SimConfig,
                      paths_per_node: int, param_grid: Sequence[Mapping[str, float]] | None = None,
                      weight_floor: float | None = DEFAULT_WEIGHT_FLOOR) -> GridFunction:
    """Tabulate ``u_M`` (or ``Phi_hat``, the max over ``param_grid``) on ``grid`` at all mesh times.

    The standard error of the maximizing vertex is stored per node.
    """
    pts = grid.points().reshape(-1, grid.n)
    if isinstance(field_or_set, UncertaintySet):
        uset = field_or_set
        fields = [(dict(p), uset.field_at(p) if p else uset.base)
                  for p in (param_grid if param_grid is not None else uset.param_grid())]
    else:
        fields = [(dict(field_or_set.params), field_or_set)]
    best_v = best_se = times = None
    for _, f in fields:
        prof = estimate_u_M_profile(f, pts, T, cfg, paths_per_node, weight_floor)
        if best_v is None:
            best_v, best_se, times = prof.values, prof.se, prof.times
        else:
            better = prof.values > best_v
            best_v = np.where(better, prof.values, best_v)
            best_se = np.where(better, prof.se, best_se)
    shape = (times.size,) + grid.shape
    meta = {"kind": "fitted", "paths_per_node": int(paths_per_node), "seed": cfg.seed,
            "weight_floor": weight_floor, "vertices": [p for p, _ in fields]}
    return GridFunction(grid, times, best_v.reshape(shape), best_se.reshape(shape), meta)


# ---------------------------------------------------------------------------
# nested diagnostics


@dataclass(frozen=True)
class CheckpointRow:
    t: float
    mean: float
    se: float
    reference: float
    reference_se: float
    z: float
    ok: bool


@dataclass(frozen=True)
class DiagnosticReport:
    name: str
    rows: tuple[CheckpointRow, ...]
    passed: bool
    partial: bool = False
    details: Mapping[str, Any] = field(default_factory=dict)

    def summary(self) -> dict[str, Any]:
        return {"name": self.name, "passed": self.passed, "partial": self.partial,
                "rows": [asdict(r) for r in self.rows], "details": _jsonable(dict(self.details))}


def _mesh_index(t: float, dt: float) -> int:
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise UsageError(f"checkpoint {t} is not on the simulation mesh (dt = {dt})")
    return k


def _continuation(field_: CoefficientField, x, cfg: SimConfig, T: float, ts: Sequence[float],
                  inner: GridFunction, floor: float | None) -> list[tuple[float, float, float]]:
    """``E[L(t) X(t) 1{kept} inner(T - t, X(t))]`` at each ``t`` with MC and inner SEs."""
    dt = cfg.T / cfg.steps
    ks = [_mesh_index(t, dt) for t in ts]
    out: dict[int, tuple[float, float, float]] = {}
    pos = [k for k in ks if k > 0]
    x = np.asarray(x, dtype=float)
    if 0 in ks:
        val = float(inner(T, x)) * _norm1(x)
        out[0] = (val, 0.0, float(inner.stderr(T, x)) * _norm1(x))
    if pos:
        kmax = max(pos)
        sim = cfg.with_(T=kmax * dt, steps=kmax, freeze_weight=floor)

        def reduce(bd: PathBundle, start: int):
            res = []
            for k in pos:
                y = bd.X[:, k]
                w = _deflated_total(bd, k) * _kept(bd, k, floor)
                res.append((w * inner(T - k * dt, y), w * inner.stderr(T - k * dt, y)))
            return res

        parts = map_blocks(field_, x, sim, reduce)
        for j, k in enumerate(pos):
            a = np.concatenate([p[j][0] for p in parts])
            b = np.concatenate([p[j][1] for p in parts])
            mean, se = _mean_se(a)
            out[k] = (mean, se, float(np.mean(b)))
    return [out[k] for k in ks]


def martingale_diagnostic(field_: CoefficientField, T: float, x, cfg: SimConfig,
                          checkpoints: Sequence[float], inner: GridFunction | None = None,
                          inner_grid: SpatialGrid | None = None, inner_paths: int = 2000,
                          budget: int | None = None,
                          weight_floor: float | None = DEFAULT_WEIGHT_FLOOR) -> DiagnosticReport:
    """Check that ``L(t) X(t) u_M(T - t, X(t))`` has constant mean ``||x|| u_M(T, x)``.

    The inner function is a fitted grid function (built here on
    ``inner_grid`` when ``inner`` is not given).  ``cfg.T``/``cfg.steps``
    fix the mesh, which must contain every checkpoint.  Each checkpoint is
    compared with a direct estimate of the reference value; the combined
    standard error adds the MC error, the reference error and the
    (fully correlated) interpolated error of the inner function.
    """
    x = np.asarray(x, dtype=float)
    if inner is None:
        if inner_grid is None:
            raise UsageError("supply either a fitted inner function or a grid to fit it on")
        need = inner_grid.nodes ** inner_grid.n * inner_paths
        if budget is not None and need > budget:
            return DiagnosticReport("martingale", (), False, partial=True,
                                    details={"reason": f"inner fit needs {need} paths > budget {budget}"})
        inner = fit_grid_function(field_, inner_grid, T, cfg.with_(steps=_inner_steps(cfg, T)),
                                  inner_paths, weight_floor=weight_floor)
    ref = estimate_u_M(field_, T, x, cfg.with_(steps=_inner_steps(cfg, T)), weight_floor)
    norm = _norm1(x)
    ref_v, ref_se = ref.estimate * norm, ref.se * norm
    vals = _continuation(field_, x, cfg, T, checkpoints, inner, weight_floor)
    rows = []
    for t, (mean, se_mc, se_in) in zip(checkpoints, vals):
        se = math.hypot(se_mc, se_in)
        z = (mean - ref_v) / math.hypot(se, ref_se)
        rows.append(CheckpointRow(float(t), mean, se, ref_v, ref_se, z, abs(z) <= 3.0))
    return DiagnosticReport("martingale", tuple(rows), all(r.ok for r in rows),
                            details={"reference": ref.row()})


def _inner_steps(cfg: SimConfig, T: float) -> int:
    # keep the mesh width of ``cfg`` when the horizon changes
    return max(1, int(round(T / (cfg.T / cfg.steps))))


def dpp_diagnostic(uset: UncertaintySet, T: float, x, cfg: SimConfig, tau: float,
                   inner: GridFunction | None = None, inner_grid: SpatialGrid | None = None,
                   inner_paths: int = 2000, param_grid: Sequence[Mapping[str, float]] | None = None,
                   weight_floor: float | None = DEFAULT_WEIGHT_FLOOR) -> DiagnosticReport:
    """Compare ``||x|| Phi_hat(T, x)`` with ``max_p E_p[L(tau) X(tau) Phi_hat(T - tau, X(tau))]``.

    ``inner`` must tabulate ``Phi_hat`` (time to maturity); it is fitted on
    ``inner_grid`` when absent.  For a singleton set the computation is
    literally the martingale diagnostic at ``t = tau``.
    """
    if not 0.0 < tau < T:
        raise UsageError(f"need 0 < tau < T, got tau={tau}, T={T}")
    x = np.asarray(x, dtype=float)
    grid = list(param_grid) if param_grid is not None else (uset.param_grid() if not uset.is_singleton() else [{}])
    if not grid:
        raise UsageError("parameter grid is empty")
    fields = [(dict(p), uset.field_at(p) if p else uset.base) for p in grid]
    ref_cfg = cfg.with_(steps=_inner_steps(cfg, T))
    if inner is None:
        if inner_grid is None:
            raise UsageError("supply either a fitted inner function or a grid to fit it on")
        inner = fit_grid_function(uset if grid != [{}] else uset.base, inner_grid, T, ref_cfg,
                                  inner_paths, param_grid=grid if grid != [{}] else None,
                                  weight_floor=weight_floor)
    norm = _norm1(x)
    lhs_best = None
    rhs_best = None
    per_vertex = []
    for p, f in fields:
        ref = estimate_u_M(f, T, x, ref_cfg, weight_floor)
        mean, se_mc, se_in = _continuation(f, x, cfg, T, [tau], inner, weight_floor)[0]
        per_vertex.append({"params": p, "lhs": ref.estimate * norm, "lhs_se": ref.se * norm,
                           "rhs": mean, "rhs_se": math.hypot(se_mc, se_in)})
        if lhs_best is None or ref.estimate * norm > lhs_best[0]:
            lhs_best = (ref.estimate * norm, ref.se * norm, p)
        if rhs_best is None or mean > rhs_best[0]:
            rhs_best = (mean, math.hypot(se_mc, se_in), p)
    z = (rhs_best[0] - lhs_best[0]) / math.hypot(rhs_best[1], lhs_best[1])
    row = CheckpointRow(float(tau), rhs_best[0], rhs_best[1], lhs_best[0], lhs_best[1], z, abs(z) <= 3.0)
    return DiagnosticReport("dpp", (row,), row.ok,
                            details={"lhs_argmax": lhs_best[2], "rhs_argmax": rhs_best[2],
                                     "vertices": per_vertex})


@dataclass(frozen=True)
class DriftReport:
    times: np.ndarray
    means: np.ndarray
    se: np.ndarray
    increments: np.ndarray
    increment_se: np.ndarray
    violations: tuple[int, ...]
    passed: bool
    flat: bool

    def summary(self) -> dict[str, Any]:
        return {"name": "supersolution_drift", "passed": self.passed, "flat": self.flat,
                "violations": list(self.violations), "times": self.times, "means": self.means,
                "se": self.se}


def supersolution_drift_diagnostic(field_: CoefficientField, U: GridFunction | Callable | float,
                                   T: float, x, cfg: SimConfig,
                                   weight_floor: float | None = DEFAULT_WEIGHT_FLOOR,
                                   k_se: float = 3.0) -> DriftReport:
    """Sample mean of ``Xi(t) = L(t) X(t) U(T - t, X(t))`` over the mesh.

    ``U`` is a grid function (time to maturity), a callable ``(s, y)`` or a
    positive constant.  Consecutive means are compared through the paired
    per-path increments: an increase beyond ``k_se`` standard errors is a
    violation.  ``flat`` reports whether every increment is also within
    ``k_se`` standard errors of zero.
    """
    if np.isscalar(U):
        c = float(U)
        if c <= 0:
            raise DomainError("U must be strictly positive")
        Ufn = lambda s, y: np.full(np.asarray(y).shape[:-1], c)  # noqa: E731
    else:
        Ufn = U
    sim = _localized_cfg(cfg, T, weight_floor)
    m = sim.steps
    dt = sim.dt

    def reduce(bd: PathBundle, start: int):
        xi = np.empty((bd.n_paths, m + 1))
        for k in range(m + 1):
            y = bd.X[:, k]
            u = np.asarray(Ufn(T - k * dt, y), dtype=float)
            if np.any(u <= 0) or not np.all(np.isfinite(u)):
                bad = np.flatnonzero(~(u > 0))[:5]
                raise DomainError(f"U is not positive at visited states {y[bad].tolist()} (t={k * dt})")
            xi[:, k] = _deflated_total(bd, k) * _kept(bd, k, weight_floor) * u
        d = np.diff(xi, axis=1)
        return (np.sum(xi, 0), np.sum(xi * xi, 0), np.sum(d, 0), np.sum(d * d, 0))

    parts = map_blocks(field_, x, sim, reduce)
    N = sim.n_paths
    S = sum(p[0] for p in parts)
    Q = sum(p[1] for p in parts)
    D = sum(p[2] for p in parts)
    DQ = sum(p[3] for p in parts)
    mean = S / N
    se = np.sqrt(np.maximum(Q / N - mean**2, 0.0) / max(N - 1, 1))
    inc = D / N
    inc_se = np.sqrt(np.maximum(DQ / N - inc**2, 0.0) / max(N - 1, 1))
    viol = tuple(int(k) for k in np.flatnonzero(inc > k_se * inc_se + 1e-15))
    flat = bool(np.all(np.abs(inc) <= k_se * inc_se + 1e-12))
    return DriftReport(sim.times, mean, se, inc, inc_se, viol, not viol, flat)


# ---------------------------------------------------------------------------
# volatility-stabilized closed-form comparison


@dataclass(frozen=True)
class FormulaComparison:
    """Definition-side estimate versus two product-ratio expressions.

    ``displayed`` is ``(prod y / ||y||) E[prod X(T) / ||X(T)||]``;
    ``reciprocal`` is ``(prod y / ||y||) E[||X(T)|| / prod X(T)]``, which
    equals ``u_M`` pathwise-in-expectation when ``gamma1 = 1`` because the
    deflator is then ``prod x / prod X(T)``.
    """

    definition: EstimateReport
    displayed: float
    displayed_se: float
    reciprocal: float
    reciprocal_se: float
    displayed_ratio: float
    reciprocal_ratio: float
    reciprocal_agrees: bool
    displayed_agrees: bool
    note: str = ""


def vsm_explicit_u(T: float, y, gamma1: float, gamma2: float, cfg: SimConfig,
                   weight_floor: float | None = DEFAULT_WEIGHT_FLOOR) -> FormulaComparison:
    """Evaluate both product-ratio expressions and compare them with ``estimate_u_M``.

    The comparison is reported, never asserted.  The reciprocal expression
    is unbounded near the boundary of the simplex and uses the same
    localization as the definition-side estimator; the displayed one is
    bounded and averages over all non-aborted paths.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    f = vsm_field(n, gamma1, gamma2)
    pref = float(np.prod(y) / np.sum(y))
    definition = estimate_u_M(f, T, y, cfg, weight_floor)
    if T == 0:
        disp, rec = pref * pref, 1.0
        note = "" if n == 1 else "displayed expression differs from the initial condition at T = 0"
        return FormulaComparison(definition, disp, 0.0, rec, 0.0, disp, rec, True, disp == 1.0, note)
    sim = _localized_cfg(cfg, T, weight_floor)
    m = sim.steps

    def reduce(bd: PathBundle, start: int):
        X = bd.X[:, m]
        valid = bd.abort_step > m
        keep = _kept(bd, m, weight_floor)
        tot, prod = np.sum(X, -1), np.prod(X, -1)
        return prod / tot * valid, tot / prod * keep, valid

    parts = map_blocks(f, y, sim, reduce)
    valid = np.concatenate([p[2] for p in parts])
    a = np.concatenate([p[0] for p in parts])[valid]
    b = np.concatenate([p[1] for p in parts])
    dm, dse = _mean_se(a)
    rm, rse = _mean_se(b)
    disp, rec = pref * dm, pref * rm
    disp_se, rec_se = pref * dse, pref * rse
    d = definition
    agree = lambda v, s: abs(v - d.estimate) <= 3.0 * math.hypot(s, d.se)  # noqa: E731
    note = "" if gamma1 == 1.0 else "reciprocal expression is exact only for gamma1 = 1"
    return FormulaComparison(d, disp, disp_se, rec, rec_se, disp / d.estimate, rec / d.estimate,
                             agree(rec, rec_se), agree(disp, disp_se), note)


# ---------------------------------------------------------------------------
# serialization


REPORT_COLUMNS = ("label", "estimate", "se", "n_paths", "seed", "T", "x", "params",
                  "n_aborted", "n_localized", "weight_floor", "flagged")


def _cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (list, dict)):
        return json.dumps(_jsonable(v), sort_keys=True, separators=(",", ":"))
    return str(v)


def write_reports_csv(reports: Sequence[EstimateReport], path) -> None:
    """One row per estimate with all provenance fields."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            row = r.row()
            w.writerow([_cell(row[c]) for c in REPORT_COLUMNS])


def write_summary(summary: Mapping[str, Any], path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(_jsonable(dict(summary)), indent=2, sort_keys=True) + "\n")
