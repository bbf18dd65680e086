"""Markovian coefficient fields, parametric Knightian uncertainty and validators.

A coefficient field maps a capitalization vector ``y`` (in the open positive
orthant) to a relative volatility matrix ``s(y)`` and a relative risk vector
``theta(y)``; the covariation rate is ``a = s s'`` and the rate of return is
``b = s theta``.  All evaluators are vectorized over leading axes: ``y`` has
shape ``(..., n)``.

Uncertainty is parametric: a family builder maps a parameter vertex to a
field, and the covariance of every admissible field is a scalar multiple
``r * a_base(y)`` with ``r`` in ``[1, c_cov]``.
"""

from __future__ import annotations

import ast
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, UsageError

ArrayFn = Callable[[np.ndarray], np.ndarray]


def _as_states(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 0 or y.shape[-1] != n:
        raise DomainError(f"expected states with trailing dimension {n}, got shape {y.shape}")
    if not np.all(np.isfinite(y)) or np.any(y <= 0.0):
        raise DomainError("states must lie in the open positive orthant")
    return y


@dataclass(frozen=True)
class CoefficientField:
    """Time-homogeneous Markovian coefficients ``y -> (s(y), theta(y))``.

    ``volatility`` returns the full ``(..., n, n)`` matrix, or only the
    ``(..., n)`` diagonal when ``diagonal`` is set.  ``homogeneous`` declares
    degree-0 homogeneity (``s(cy) = s(y)``); it is a declaration that tests
    check, not something inferred.
    """

    n: int
    volatility: ArrayFn
    risk: ArrayFn
    diagonal: bool = False
    family: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)
    homogeneous: bool = False

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError(f"dimension must be a positive integer, got {self.n}")

    # raw evaluators, no domain checks; used in the simulator's inner loop
    def _vol(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.volatility(y), dtype=float)

    def _theta(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.risk(y), dtype=float)

    def s(self, y) -> np.ndarray:
        y = _as_states(y, self.n)
        v = self._vol(y)
        if self.diagonal:
            return v[..., :, None] * np.eye(self.n)
        return v

    def theta(self, y) -> np.ndarray:
        y = _as_states(y, self.n)
        return np.broadcast_to(self._theta(y), y.shape).copy()

    def a(self, y) -> np.ndarray:
        s = self.s(y)
        return s @ np.swapaxes(s, -1, -2)

    def a_diag(self, y) -> np.ndarray:
        """Diagonal of ``a(y)``."""
        y = _as_states(y, self.n)
        v = self._vol(y)
        if self.diagonal:
            return v * v
        return np.sum(v * v, axis=-1)

    def b(self, y) -> np.ndarray:
        return np.einsum("...ij,...j->...i", self.s(y), self.theta(y))


def _weights_ratio(y: np.ndarray) -> np.ndarray:
    # ||y||_1 / y_i
    return np.sum(y, axis=-1, keepdims=True) / y


def vsm_field(n: int, gamma1: float, gamma2: float) -> CoefficientField:
    """Volatility-stabilized field with drift scale ``gamma1`` and volatility scale ``gamma2``.

    ``s_ii(y) = gamma2 * sqrt(||y||_1 / y_i)`` and
    ``theta_i(y) = gamma1 * gamma2 * sqrt(||y||_1 / y_i)``.
    """
    if gamma1 < 0.5:
        raise ConfigurationError(f"VSM requires gamma1 >= 1/2, got {gamma1}")
    if gamma2 < 1.0:
        raise ConfigurationError(f"VSM requires gamma2 >= 1, got {gamma2}")
    g1, g2 = float(gamma1), float(gamma2)

    def vol(y):
        return g2 * np.sqrt(_weights_ratio(y))

    def risk(y):
        return g1 * g2 * np.sqrt(_weights_ratio(y))

    return CoefficientField(
        n=n, volatility=vol, risk=risk, diagonal=True, family="vsm",
        params={"gamma1": g1, "gamma2": g2}, homogeneous=True,
    )


def gvsm_field(
    n: int,
    kappa: float,
    gammas: Sequence[float],
    G: float | Callable[[np.ndarray], np.ndarray] = 1.0,
    G_homogeneous: bool | None = None,
) -> CoefficientField:
    """Generalized volatility-stabilized field.

    ``gammas`` holds ``gamma_1..gamma_n`` (log-drift scales) followed by
    ``gamma_{n+1}`` (volatility scale).  ``G`` is a positive constant or a
    vectorized callable ``y -> G(y)`` of shape ``(...)``.
    """
    gammas = [float(g) for g in gammas]
    if len(gammas) != n + 1:
        raise ConfigurationError(f"GVSM needs n+1 = {n + 1} gammas, got {len(gammas)}")
    if kappa <= 0:
        raise ConfigurationError(f"kappa must be positive, got {kappa}")
    if any(g < 0 for g in gammas[:n]):
        raise ConfigurationError("drift scales gamma_1..gamma_n must be nonnegative")
    gv = gammas[n]
    if gv < 1.0:
        raise ConfigurationError(f"gamma_(n+1) must be >= 1, got {gv}")

    if callable(G):
        Gfn = G
        probe = np.exp(np.random.default_rng(0).normal(size=(64, n)))
        vals = np.asarray(Gfn(probe), dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise ConfigurationError("G must be finite and strictly positive")
        homogeneous = bool(G_homogeneous)
    else:
        Gc = float(G)
        if not math.isfinite(Gc) or Gc <= 0:
            raise ConfigurationError(f"G must be strictly positive (s invertible), got {G}")

        def Gfn(y, _c=Gc):
            return np.full(y.shape[:-1], _c)

        homogeneous = True if G_homogeneous is None else bool(G_homogeneous)

    drift_scale = np.array([(g + gv * gv) / (2.0 * gv) for g in gammas[:n]])
    k = float(kappa)

    def vol(y):
        return gv * _weights_ratio(y) ** k * np.asarray(Gfn(y), dtype=float)[..., None]

    def risk(y):
        return drift_scale * _weights_ratio(y) ** k * np.asarray(Gfn(y), dtype=float)[..., None]

    params = {f"gamma{i + 1}": g for i, g in enumerate(gammas)}
    params["kappa"] = k
    return CoefficientField(
        n=n, volatility=vol, risk=risk, diagonal=True, family="gvsm",
        params=params, homogeneous=homogeneous,
    )


def constant_field(s, theta) -> CoefficientField:
    """Field with state-independent ``s`` and ``theta``."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    n = s.shape[0]
    if s.shape != (n, n) or theta.shape != (n,):
        raise ConfigurationError("s must be n x n and theta an n-vector")
    if abs(np.linalg.det(s)) < 1e-14:
        raise ConfigurationError("volatility matrix must be invertible")
    diag = bool(np.all(s == np.diag(np.diag(s))))
    d = np.diag(s).copy()

    if diag:
        def vol(y):
            return np.broadcast_to(d, y.shape)
    else:
        def vol(y):
            return np.broadcast_to(s, y.shape[:-1] + (n, n))

    def risk(y):
        return np.broadcast_to(theta, y.shape)

    return CoefficientField(n=n, volatility=vol, risk=risk, diagonal=diag,
                            family="constant", homogeneous=True)


# ---------------------------------------------------------------------------
# closed-form expressions for user-supplied G

_ALLOWED_FUNCS = {
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
    "sin": np.sin, "cos": np.cos, "tanh": np.tanh, "arctan": np.arctan,
    "minimum": np.minimum, "maximum": np.maximum,
}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
    ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd,
)


def compile_expression(expr: str, n: int) -> Callable[[np.ndarray], np.ndarray]:
    """Compile a closed-form expression in ``y1..yn`` and ``norm`` (the l1 norm).

    Only arithmetic and a fixed set of numpy functions are accepted.
    """
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse expression {expr!r}: {exc}") from None
    names = {f"y{i + 1}" for i in range(n)} | {"norm"}
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigurationError(f"disallowed syntax in {expr!r}: {type(node).__name__}")
        if isinstance(node, ast.Name) and node.id not in names and node.id not in _ALLOWED_FUNCS:
            raise ConfigurationError(f"unknown name {node.id!r} in {expr!r}")
        if isinstance(node, ast.Call) and not (
            isinstance(node.func, ast.Name) and node.func.id in _ALLOWED_FUNCS
        ):
            raise ConfigurationError(f"disallowed call in {expr!r}")
    code = compile(tree, "<G>", "eval")

    def fn(y):
        y = np.asarray(y, dtype=float)
        env = {f"y{i + 1}": y[..., i] for i in range(n)}
        env["norm"] = np.sum(y, axis=-1)
        env.update(_ALLOWED_FUNCS)
        out = eval(code, {"__builtins__": {}}, env)  # noqa: S307 - AST whitelisted above
        return np.broadcast_to(np.asarray(out, dtype=float), y.shape[:-1])

    fn.expression = expr
    return fn


# ---------------------------------------------------------------------------
# uncertainty sets


@dataclass(frozen=True)
class UncertaintySet:
    """Parametric description of ``K(y)``.

    ``intervals`` maps each parameter name to a closed interval; ``build``
    turns a parameter vertex into a field; ``cov_scale`` gives the
    covariance multiplier ``r`` of that vertex relative to ``base`` (so that
    ``a_vertex = r * a_base``), with ``r`` ranging over ``[1, c_cov]``.
    """

    base: CoefficientField
    c_cov: float
    intervals: Mapping[str, tuple[float, float]]
    build: Callable[[Mapping[str, float]], CoefficientField]
    cov_scale: Callable[[Mapping[str, float]], float]
    family: str = "custom"

    def __post_init__(self):
        if not math.isfinite(self.c_cov) or self.c_cov < 1.0:
            raise ConfigurationError(f"covariance scaling bound must be finite and >= 1, got {self.c_cov}")
        for name, (lo, hi) in self.intervals.items():
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigurationError(f"interval for {name} must be finite with lo <= hi, got {(lo, hi)}")

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def scaling_interval(self) -> tuple[float, float]:
        return (1.0, float(self.c_cov))

    def contains(self, params: Mapping[str, float], tol: float = 1e-12) -> bool:
        if set(params) != set(self.intervals):
            return False
        return all(lo - tol <= params[k] <= hi + tol for k, (lo, hi) in self.intervals.items())

    def field_at(self, params: Mapping[str, float]) -> CoefficientField:
        if not self.contains(params):
            raise ConfigurationError(f"parameters {dict(params)} outside the uncertainty set")
        return self.build(params)

    def vertices(self) -> list[dict[str, float]]:
        """Corners of the parameter box (degenerate intervals contribute one value)."""
        axes = [sorted({lo, hi}) for lo, hi in self.intervals.values()]
        return [dict(zip(self.intervals, combo)) for combo in itertools.product(*axes)]

    def param_grid(self, points: int = 5) -> list[dict[str, float]]:
        """Cartesian grid with ``points`` nodes per non-degenerate interval."""
        if points < 1:
            raise UsageError("need at least one point per interval")
        axes = []
        for lo, hi in self.intervals.values():
            axes.append([lo] if lo == hi or points == 1 else list(np.linspace(lo, hi, points)))
        return [dict(zip(self.intervals, map(float, combo))) for combo in itertools.product(*axes)]

    def is_singleton(self) -> bool:
        return self.c_cov == 1.0 and all(lo == hi for lo, hi in self.intervals.values())


def singleton_uncertainty(f: CoefficientField) -> UncertaintySet:
    """No uncertainty: ``K(y) = {(theta(y), a(y))}``."""
    return UncertaintySet(base=f, c_cov=1.0, intervals={}, build=lambda p: f,
                          cov_scale=lambda p: 1.0, family=f.family)


def vsm_uncertainty(n: int, c1: float, c1_star: float, c2: float) -> UncertaintySet:
    """VSM family with ``gamma1 in [c1, c1*]`` and ``gamma2 in [1, c2]``.

    The volatility scale enters the covariance squared, so the covariance
    multiplier ranges over ``[1, c2**2]``.
    """
    if c1 < 0.5 or c1_star < c1:
        raise ConfigurationError(f"need c1* >= c1 >= 1/2, got c1={c1}, c1*={c1_star}")
    if c2 < 1.0:
        raise ConfigurationError(f"need c2 >= 1, got {c2}")
    return UncertaintySet(
        base=vsm_field(n, c1, 1.0),
        c_cov=float(c2) ** 2,
        intervals={"gamma1": (float(c1), float(c1_star)), "gamma2": (1.0, float(c2))},
        build=lambda p: vsm_field(n, p["gamma1"], p["gamma2"]),
        cov_scale=lambda p: float(p["gamma2"]) ** 2,
        family="vsm",
    )


def gvsm_uncertainty(
    n: int,
    kappa: float,
    drift_bounds: Sequence[tuple[float, float]],
    c_vol: float,
    G: float | Callable[[np.ndarray], np.ndarray] = 1.0,
    G_homogeneous: bool | None = None,
) -> UncertaintySet:
    """GVSM family with ``gamma_i in drift_bounds[i]`` and ``gamma_(n+1) in [1, c_vol]``."""
    if len(drift_bounds) != n:
        raise ConfigurationError(f"need {n} drift intervals, got {len(drift_bounds)}")
    if c_vol < 1.0:
        raise ConfigurationError(f"need c_(n+1) >= 1, got {c_vol}")
    intervals = {f"gamma{i + 1}": (float(lo), float(hi)) for i, (lo, hi) in enumerate(drift_bounds)}
    vol_name = f"gamma{n + 1}"
    intervals[vol_name] = (1.0, float(c_vol))

    def build(p):
        return gvsm_field(n, kappa, [p[f"gamma{i + 1}"] for i in range(n + 1)], G, G_homogeneous)

    base = build({k: lo for k, (lo, _) in intervals.items()})
    return UncertaintySet(base=base, c_cov=float(c_vol) ** 2, intervals=intervals, build=build,
                          cov_scale=lambda p: float(p[vol_name]) ** 2, family="gvsm")


def a_set_endpoints(uset: UncertaintySet, y) -> tuple[np.ndarray, np.ndarray]:
    """Extreme covariance matrices ``(a(y), c_cov * a(y))`` of ``A(y)``."""
    a = uset.base.a(y)
    return a, uset.c_cov * a


# ---------------------------------------------------------------------------
# validators


@dataclass(frozen=True)
class LinearGrowthReport:
    worst_ratio: float
    ratios: np.ndarray
    bound: float
    passed: bool


def check_linear_growth(f: CoefficientField, sample_grid, bound: float = 10.0) -> LinearGrowthReport:
    """Evaluate ``(||s(y)|| + ||b(y)||) / (1 + ||y||)`` over a sample grid.

    ``||s||`` is the spectral norm, the vector norms are Euclidean.  The
    check passes when every ratio is finite and at most ``bound``.
    """
    y = np.asarray(sample_grid, dtype=float)
    if y.size == 0:
        raise UsageError("sample grid is empty")
    y = _as_states(y.reshape(-1, f.n), f.n)
    s = f.s(y)
    s_norm = np.linalg.norm(s, ord=2, axis=(-2, -1))
    b_norm = np.linalg.norm(f.b(y), axis=-1)
    ratios = (s_norm + b_norm) / (1.0 + np.linalg.norm(y, axis=-1))
    worst = float(np.max(ratios))
    return LinearGrowthReport(worst, ratios, float(bound), bool(np.isfinite(worst) and worst <= bound))


@dataclass(frozen=True)
class StrongArbitrageReport:
    constant: float
    excess_growth_inf: float
    geometric_inf: float
    source: str
    holds: bool


def check_strong_arbitrage(uset: UncertaintySet, sample_grid, min_constant: float = 1e-6) -> StrongArbitrageReport:
    """Lower bounds guaranteeing robust strong arbitrage relative to the market.

    Two expressions are evaluated pointwise, each minimized over the
    covariance endpoints ``{a, c_cov a}`` (both are linear in the scaling):

    * excess growth: ``sum_i y_i a_ii / ||y|| - sum_ij y_i y_j a_ij / ||y||^2``
    * geometric: ``(prod y)^(1/n) / ||y|| * (sum_i a_ii - sum_ij a_ij / n)``

    Their grid infima are both reported.  The returned constant is the
    excess-growth infimum when positive, and the geometric infimum otherwise.
    """
    y = np.asarray(sample_grid, dtype=float)
    if y.size == 0:
        raise UsageError("sample grid is empty")
    y = _as_states(y.reshape(-1, uset.n), uset.n)
    a = uset.base.a(y)
    norm = np.sum(y, axis=-1)
    diag = np.einsum("...ii->...i", a)
    e1 = np.sum(y * diag, axis=-1) / norm - np.einsum("...i,...ij,...j->...", y, a, y) / norm**2
    n = uset.n
    gm = np.exp(np.mean(np.log(y), axis=-1))
    e2 = gm / norm * (np.sum(diag, axis=-1) - np.sum(a, axis=(-2, -1)) / n)
    ends = np.array([1.0, uset.c_cov])
    inf1 = float(np.min(np.minimum(e1 * ends[0], e1 * ends[1])))
    inf2 = float(np.min(np.minimum(e2 * ends[0], e2 * ends[1])))
    if inf1 > 0:
        const, src = inf1, "excess_growth"
    elif inf2 > 0:
        const, src = inf2, "geometric"
    else:
        const, src = 0.0, "none"
    return StrongArbitrageReport(const, inf1, inf2, src, bool(const >= min_constant))


def lipschitz_slope(fn: Callable[[np.ndarray], np.ndarray], sample_grid, rel_step: float = 1e-4) -> float:
    """Largest finite-difference slope of a scalar function over a sample grid."""
    y = np.atleast_2d(np.asarray(sample_grid, dtype=float))
    base = np.asarray(fn(y), dtype=float)
    worst = 0.0
    for i in range(y.shape[-1]):
        h = rel_step * y[:, i]
        yp = y.copy()
        yp[:, i] += h
        slope = np.abs(np.asarray(fn(yp), dtype=float) - base) / h
        worst = max(worst, float(np.max(slope)))
    return worst


@dataclass(frozen=True)
class AssumptionReport:
    max_risk_norm: float
    max_cov_norm: float
    max_cov_oscillation: float
    bounded: bool


def check_assumptions(uset: UncertaintySet, sample_grid, radius: float = 1e-3,
                      bound: float = 1e12) -> AssumptionReport:
    """Numerical spot-check of local boundedness and continuity of ``K``.

    Boundedness: the largest ``||theta||`` and ``||a||`` over all parameter
    vertices and grid points.  Continuity: the largest change of ``a`` under
    a relative perturbation of size ``radius`` of each grid point.
    """
    y = _as_states(np.asarray(sample_grid, dtype=float).reshape(-1, uset.n), uset.n)
    rng = np.random.default_rng(0)
    yp = y * (1.0 + radius * rng.uniform(-1, 1, size=y.shape))
    th_max = cov_max = osc = 0.0
    for p in uset.vertices() or [{}]:
        f = uset.build(p) if p else uset.base
        th_max = max(th_max, float(np.max(np.linalg.norm(f.theta(y), axis=-1))))
        a = f.a(y)
        cov_max = max(cov_max, float(np.max(np.abs(a))))
        osc = max(osc, float(np.max(np.abs(f.a(yp) - a))))
    ok = math.isfinite(th_max) and math.isfinite(cov_max) and max(th_max, cov_max) <= bound
    return AssumptionReport(th_max, cov_max, osc, bool(ok))
