"""Explicit monotone scheme for the robust arbitrage-function Cauchy problem.

The equation is ``u_t = sup_{a in A(x)} L_a u`` with ``u(0, .) = 1`` and

    L_a u = sum_ij x_i x_j a_ij (D_ij u / 2 + D_i u / ||x||_1).

Covariances are diagonal and ``A(x) = {r a(x) : 1 <= r <= c_cov}``, so the
sup is ``L u`` when ``L u < 0`` and ``c_cov L u`` otherwise.

Discretization, on a log-uniform grid in ``x``: second derivatives use the
three-point formula on the non-uniform spacing; the first-order term has a
positive coefficient and is differenced forward (``upwind``) or, optionally,
centrally (``central``).  Both choices give nonnegative neighbour weights
because every spacing is smaller than ``||x||_1``.  Boundary nodes carry
Dirichlet data supplied by a closure object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import CFLViolation, ConfigurationError, UsageError
from .grid import GridFunction, SpatialGrid
from .models import CoefficientField, UncertaintySet, singleton_uncertainty
from .sde import SimConfig

# ---------------------------------------------------------------------------
# pointwise operators


def _axis_spacing(grid: SpatialGrid) -> tuple[np.ndarray, np.ndarray]:
    x = grid.axis
    d = np.diff(x)
    return d[:-1], d[1:]  # h_minus, h_plus at interior positions 1..m-2


def apply_generator(grid: SpatialGrid, a, u: np.ndarray, node: Sequence[int],
                    first_order: str = "upwind") -> float:
    """Discrete ``L_a u`` at one interior node for a diagonal covariance ``a``.

    ``a`` may be the full ``n x n`` matrix (it must be diagonal) or its
    diagonal.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        if np.any(np.abs(a - np.diag(np.diag(a))) > 0):
            raise ConfigurationError("only diagonal covariance matrices are supported")
        a = np.diag(a)
    node = tuple(int(i) for i in node)
    if len(node) != grid.n:
        raise UsageError(f"node must have {grid.n} indices")
    if any(i <= 0 or i >= grid.nodes - 1 for i in node):
        raise UsageError(f"node {node} is on the boundary; boundary values come from the closure")
    xs = grid.axis
    x = np.array([xs[i] for i in node])
    norm = float(np.sum(x))
    u = np.asarray(u, dtype=float)
    total = 0.0
    for ax in range(grid.n):
        i = node[ax]
        lo, hi = list(node), list(node)
        lo[ax] -= 1
        hi[ax] += 1
        um, u0, up = u[tuple(lo)], u[node], u[tuple(hi)]
        hm, hp = xs[i] - xs[i - 1], xs[i + 1] - xs[i]
        A = x[ax] ** 2 * a[ax]
        d2 = 2.0 * ((up - u0) / hp - (u0 - um) / hm) / (hp + hm)
        d1 = (up - u0) / hp if first_order == "upwind" else (up - um) / (hp + hm)
        total += A * (0.5 * d2 + d1 / norm)
    return float(total)


def hjb_sup(a_base, c_cov: float, L_base):
    """``sup_{1 <= r <= c_cov} r * L_base``; ``a_base`` is accepted for symmetry and unused."""
    if not c_cov >= 1.0:
        raise ConfigurationError(f"covariance scaling bound must be >= 1, got {c_cov}")
    L = np.asarray(L_base, dtype=float)
    out = np.where(L < 0, L, c_cov * L)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# boundary closures


class BoundaryClosure:
    """Dirichlet data on the boundary nodes of a grid, as a function of time."""

    provenance: Mapping[str, Any] = {}

    def values(self, t: float, grid: SpatialGrid) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantBoundary(BoundaryClosure):
    value: float = 1.0

    @property
    def provenance(self):
        return {"kind": "constant", "value": self.value}

    def values(self, t, grid):
        return np.full(int(np.sum(grid.boundary_mask())), float(self.value))


@dataclass(frozen=True)
class TabulatedBoundary(BoundaryClosure):
    """Boundary data ``values[j, b]`` at times ``times[j]`` for boundary node ``b``.

    Boundary nodes are ordered as ``grid.points()[grid.boundary_mask()]``.
    On construction the table is clipped to ``[0, 1]``, pinned to 1 at
    ``t = 0`` and replaced by its running minimum in time, so the data are
    non-increasing in ``t``; the largest change made by this projection is
    kept in ``provenance``.
    """

    times: np.ndarray
    table: np.ndarray
    se: np.ndarray | None = None
    info: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        raw = np.asarray(self.table, dtype=float)
        if t.ndim != 1 or raw.shape[0] != t.size or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ConfigurationError("boundary table needs increasing times starting at 0")
        proj = np.clip(raw, 0.0, 1.0)
        proj[0] = 1.0
        proj = np.minimum.accumulate(proj, axis=0)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "table", proj)
        info = dict(self.info)
        info["projection_max_change"] = float(np.max(np.abs(proj - raw))) if raw.size else 0.0
        object.__setattr__(self, "info", info)

    @property
    def provenance(self):
        return {"kind": "tabulated", **self.info}

    def restrict(self, fine: SpatialGrid, coarse: SpatialGrid) -> "TabulatedBoundary":
        """The same data on a coarser grid whose boundary nodes are fine-grid nodes."""
        if self.table.shape[1] != int(np.sum(fine.boundary_mask())):
            raise ConfigurationError("boundary table does not match the fine grid")
        ratio = (fine.nodes - 1) / (coarse.nodes - 1)
        if (fine.n != coarse.n or fine.x_lo != coarse.x_lo or fine.x_hi != coarse.x_hi
                or ratio != int(ratio)):
            raise ConfigurationError("coarse grid is not nested in the fine grid")
        slot = np.full(fine.shape, -1, dtype=np.int64)
        slot[fine.boundary_mask()] = np.arange(self.table.shape[1])
        sub = slot[(slice(None, None, int(ratio)),) * fine.n]
        cols = sub[coarse.boundary_mask()]
        se = None if self.se is None else np.asarray(self.se)[:, cols]
        out = TabulatedBoundary(self.times, self.table[:, cols], se, self.info)
        object.__setattr__(out, "info", {**self.info, "restricted_from_nodes": fine.nodes})
        return out

    def values(self, t, grid):
        if self.table.shape[1] != int(np.sum(grid.boundary_mask())):
            raise ConfigurationError("boundary table does not match the grid")
        ts = self.times
        if t >= ts[-1]:
            if t > ts[-1] * (1 + 1e-12):
                raise UsageError(f"boundary data end at t={ts[-1]}, requested t={t}")
            return self.table[-1].copy()
        j = int(np.searchsorted(ts, t, side="right")) - 1
        lam = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (1 - lam) * self.table[j] + lam * self.table[j + 1]


def mc_boundary(model: CoefficientField | UncertaintySet, grid: SpatialGrid, T: float, cfg: SimConfig,
                paths_per_node: int, param_grid: Sequence[Mapping[str, float]] | None = None,
                weight_floor: float | None = None) -> TabulatedBoundary:
    """Boundary data from Monte-Carlo profiles of ``u_M`` (max over vertices for a set)."""
    from . import estimators as est  # local import: estimators depends on this module's peers

    floor = est.DEFAULT_WEIGHT_FLOOR if weight_floor is None else weight_floor
    pts = grid.points()[grid.boundary_mask()]
    if isinstance(model, UncertaintySet):
        verts = list(param_grid) if param_grid is not None else (
            [{}] if model.is_singleton() else model.param_grid())
        fields = [(p, model.field_at(p) if p else model.base) for p in verts]
    else:
        fields = [(dict(model.params), model)]
    best = se = times = None
    for _, f in fields:
        prof = est.estimate_u_M_profile(f, pts, T, cfg, paths_per_node, floor)
        if best is None:
            best, se, times = prof.values, prof.se, prof.times
        else:
            better = prof.values > best
            best, se = np.where(better, prof.values, best), np.where(better, prof.se, se)
    info = {"source": "monte_carlo", "paths_per_node": int(paths_per_node), "seed": cfg.seed,
            "steps": cfg.steps, "weight_floor": floor, "vertices": [p for p, _ in fields],
            "max_se": float(np.max(se))}
    return TabulatedBoundary(times, best, se, info)


# ---------------------------------------------------------------------------
# problem and solver


@dataclass(frozen=True)
class Stencil:
    """Neighbour weights of the discrete ``L_a`` at interior nodes (base covariance)."""

    minus: tuple[np.ndarray, ...]
    plus: tuple[np.ndarray, ...]
    center: np.ndarray  # sum of all neighbour weights

    def apply(self, u: np.ndarray) -> np.ndarray:
        n = len(self.minus)
        inner = (slice(1, -1),) * n
        out = -self.center * u[inner]
        for ax in range(n):
            lo = [slice(1, -1)] * n
            hi = [slice(1, -1)] * n
            lo[ax] = slice(0, -2)
            hi[ax] = slice(2, None)
            out = out + self.minus[ax] * u[tuple(lo)] + self.plus[ax] * u[tuple(hi)]
        return out


def build_stencil(grid: SpatialGrid, base: CoefficientField, first_order: str = "upwind") -> Stencil:
    if first_order not in ("upwind", "central"):
        raise ConfigurationError(f"first_order must be 'upwind' or 'central', got {first_order!r}")
    if not base.diagonal:
        raise ConfigurationError("the solver supports diagonal covariance fields only")
    if base.n != grid.n:
        raise ConfigurationError("grid and model dimensions differ")
    n = grid.n
    pts = grid.points()[(slice(1, -1),) * n]
    adiag = base.a_diag(pts)
    norm = np.sum(pts, axis=-1)
    hm1, hp1 = _axis_spacing(grid)
    minus, plus = [], []
    for ax in range(n):
        shape = [1] * n
        shape[ax] = -1
        hm, hp = hm1.reshape(shape), hp1.reshape(shape)
        A = pts[..., ax] ** 2 * adiag[..., ax]
        c2 = A / (hm + hp)  # (1/2) * A * 2 / (hm + hp)
        wm = c2 / hm
        wp = c2 / hp
        if first_order == "upwind":
            wp = wp + A / norm / hp
        else:
            wp = wp + A / norm / (hm + hp)
            wm = wm - A / norm / (hm + hp)
        minus.append(np.broadcast_to(wm, pts.shape[:-1]).copy())
        plus.append(np.broadcast_to(wp, pts.shape[:-1]).copy())
    center = sum(minus) + sum(plus)
    if any(np.any(w < 0) for w in minus + plus):
        raise ConfigurationError("negative neighbour weight: the scheme would not be monotone")
    return Stencil(tuple(minus), tuple(plus), center)


@dataclass(frozen=True)
class HJBProblem:
    """Cauchy problem on a truncated box.

    ``dt`` is chosen from the CFL bound times ``cfl_safety`` unless given;
    an explicit ``dt`` above the bound is rejected at solve time.
    ``n_slices`` bounds how many time slices are stored in the output.
    """

    uset: UncertaintySet
    boundary: BoundaryClosure
    T: float
    grid: SpatialGrid
    cfl_safety: float = 0.9
    dt: float | None = None
    first_order: str = "upwind"
    n_slices: int = 201

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigurationError(f"horizon must be positive, got {self.T}")
        if not 0 < self.cfl_safety <= 1:
            raise ConfigurationError("cfl_safety must lie in (0, 1]")
        if self.uset.n != self.grid.n:
            raise ConfigurationError("grid and model dimensions differ")
        if self.n_slices < 2:
            raise ConfigurationError("store at least two slices")

    @property
    def c_cov(self) -> float:
        return float(self.uset.c_cov)

    def stencil(self) -> Stencil:
        return build_stencil(self.grid, self.uset.base, self.first_order)

    def dt_max(self, stencil: Stencil | None = None) -> tuple[float, tuple[int, ...]]:
        """Largest stable step and the node that limits it."""
        st = stencil or self.stencil()
        rate = self.c_cov * st.center
        j = np.unravel_index(int(np.argmax(rate)), rate.shape)
        return 1.0 / float(rate[j]), tuple(int(i) + 1 for i in j)

    def time_grid(self, stencil: Stencil | None = None) -> tuple[float, int]:
        bound, node = self.dt_max(stencil)
        if self.dt is not None:
            if self.dt > bound:
                raise CFLViolation(f"dt={self.dt} exceeds the monotonicity bound {bound:.3e} at node {node}",
                                   node)
            k = int(math.ceil(self.T / self.dt - 1e-9))
        else:
            k = int(math.ceil(self.T / (self.cfl_safety * bound)))
        return self.T / k, k


def step(problem: HJBProblem, u: np.ndarray, t_next: float, dt: float,
         stencil: Stencil | None = None) -> np.ndarray:
    """Advance one explicit step: interior ``u + dt * sup L u``, boundary from the closure."""
    st = stencil or problem.stencil()
    bound, node = problem.dt_max(st)
    if dt > bound * (1 + 1e-12):
        raise CFLViolation(f"dt={dt} exceeds the monotonicity bound {bound:.3e} at node {node}", node)
    return _step(problem, st, u, t_next, dt)


def _step(problem: HJBProblem, st: Stencil, u: np.ndarray, t_next: float, dt: float) -> np.ndarray:
    n = problem.grid.n
    inner = (slice(1, -1),) * n
    Lu = st.apply(u)
    new = np.empty_like(u)
    new[inner] = u[inner] + dt * hjb_sup(None, problem.c_cov, Lu)
    new[problem.grid.boundary_mask()] = problem.boundary.values(t_next, problem.grid)
    return new


def solve(problem: HJBProblem, u0: np.ndarray | None = None) -> GridFunction:
    """March from ``u(0) = 1`` (or ``u0``) to ``T``; returns roughly ``n_slices`` stored slices."""
    grid = problem.grid
    st = problem.stencil()
    dt, K = problem.time_grid(st)
    u = np.ones(grid.shape) if u0 is None else np.array(u0, dtype=float)
    if u.shape != grid.shape:
        raise ConfigurationError("initial slice does not match the grid")
    stride = max(1, int(math.ceil(K / (problem.n_slices - 1))))
    keep = sorted(set(range(0, K + 1, stride)) | {K})
    times, slices = [0.0], [u.copy()]
    for k in range(1, K + 1):
        u = _step(problem, st, u, k * dt, dt)
        if k in keep and k > 0:
            times.append(k * dt)
            slices.append(u.copy())
    times[-1] = problem.T
    meta = {"kind": "hjb_solution", "grid": grid.to_dict(), "T": problem.T, "dt": dt, "steps": K,
            "c_cov": problem.c_cov, "first_order": problem.first_order,
            "model": {"family": problem.uset.family, "intervals": dict(problem.uset.intervals),
                      "base_params": dict(problem.uset.base.params)},
            "boundary": dict(problem.boundary.provenance)}
    return GridFunction(grid, np.array(times), np.stack(slices), None, meta)


# ---------------------------------------------------------------------------
# consistency checks


def _probe_indices(grid: SpatialGrid, probes) -> list[tuple[int, ...]]:
    out = []
    for p in probes:
        p = tuple(int(i) for i in np.atleast_1d(p))
        if len(p) != grid.n or any(i <= 0 or i >= grid.nodes - 1 for i in p):
            raise UsageError(f"probe {p} must be an interior node index")
        out.append(p)
    return out


@dataclass(frozen=True)
class ResidualReport:
    max_residual: float
    residuals: np.ndarray  # (slices, probes)
    times: np.ndarray
    probes: tuple[tuple[int, ...], ...]
    flagged: tuple[tuple[int, int], ...]


def residual(u: GridFunction, probes, uset: UncertaintySet, first_order: str = "upwind",
             threshold: float | None = None) -> ResidualReport:
    """``|du/dt - sup L u|`` at interior probe nodes for every stored slice but the first two.

    The time derivative is a centred difference of neighbouring slices.
    With ``threshold`` set, entries above it are listed in ``flagged``.
    """
    grid = u.grid
    st = build_stencil(grid, uset.base, first_order)
    idx = _probe_indices(grid, probes)
    ts, vals = u.times, u.values
    if ts.size < 4:
        raise UsageError("need at least four stored slices")
    rows = []
    for j in range(2, ts.size - 1):
        ut = (vals[j + 1] - vals[j - 1]) / (ts[j + 1] - ts[j - 1])
        L = hjb_sup(None, uset.c_cov, st.apply(vals[j]))
        rows.append([abs(ut[p] - L[tuple(i - 1 for i in p)]) for p in idx])
    res = np.array(rows)
    flagged: tuple = ()
    if threshold is not None:
        flagged = tuple((int(a) + 2, int(b)) for a, b in zip(*np.nonzero(res > threshold)))
    return ResidualReport(float(np.max(res)) if res.size else 0.0, res, ts[2:-1], tuple(idx), flagged)


@dataclass(frozen=True)
class PucciReport:
    initial_error: float
    max_residual: float
    residuals: np.ndarray
    times: np.ndarray


def pucci_transform_check(u: GridFunction, uset: UncertaintySet, probes,
                          t_min: float | None = None) -> PucciReport:
    """Residual of ``v = ||x|| u`` in ``v_t = (1/2) sup_r sum_i r x_i^2 a_ii D_ii v``.

    The second derivatives are three-point differences on the grid; the
    time derivative is a centred difference of stored slices.  Slices with
    ``t < t_min`` are skipped (default: the first two).
    """
    grid = u.grid
    pts = grid.points()
    norm = np.sum(pts, axis=-1)
    v = u.values * norm
    init_err = float(np.max(np.abs(v[0] - norm))) if u.times[0] == 0.0 else float("nan")
    idx = _probe_indices(grid, probes)
    xs = grid.axis
    hm, hp = _axis_spacing(grid)
    inner = (slice(1, -1),) * grid.n
    adiag = uset.base.a_diag(pts[inner])
    ts = u.times
    rows, tkeep = [], []
    for j in range(2, ts.size - 1):
        if t_min is not None and ts[j] < t_min:
            continue
        vt = (v[j + 1] - v[j - 1]) / (ts[j + 1] - ts[j - 1])
        G = np.zeros(adiag.shape[:-1])
        for ax in range(grid.n):
            shape = [1] * grid.n
            shape[ax] = -1
            lo = [slice(1, -1)] * grid.n
            hi = [slice(1, -1)] * grid.n
            lo[ax], hi[ax] = slice(0, -2), slice(2, None)
            h_m, h_p = hm.reshape(shape), hp.reshape(shape)
            d2 = 2.0 * ((v[j][tuple(hi)] - v[j][inner]) / h_p - (v[j][inner] - v[j][tuple(lo)]) / h_m) / (h_m + h_p)
            G = G + 0.5 * pts[inner][..., ax] ** 2 * adiag[..., ax] * d2
        rhs = hjb_sup(None, uset.c_cov, G)
        rows.append([abs(vt[p] - rhs[tuple(i - 1 for i in p)]) for p in idx])
        tkeep.append(ts[j])
    res = np.array(rows)
    return PucciReport(init_err, float(np.max(res)) if res.size else 0.0, res, np.array(tkeep))


def richardson(coarse: float, fine: float, order: float = 1.0) -> tuple[float, float]:
    """Extrapolated value and error bound from two solutions at spacings ``2h`` and ``h``."""
    f = 2.0 ** order
    extra = fine + (fine - coarse) / (f - 1.0)
    return extra, abs(fine - coarse) / (f - 1.0)


def singleton_problem(f: CoefficientField, boundary: BoundaryClosure, T: float, grid: SpatialGrid,
                      **kw) -> HJBProblem:
    return HJBProblem(singleton_uncertainty(f), boundary, T, grid, **kw)
