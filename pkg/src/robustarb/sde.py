"""Log-Euler simulation of capitalizations, the deflator and wealth processes.

Paths are generated in fixed-size blocks.  Block ``b`` draws its mesh
increments from a Philox stream keyed by ``(seed, b)`` and its bridge
refinements from the stream ``(seed, b, 1)``, so the output depends only on
``(seed, config, model)`` and never on the number of workers.

Within a mesh interval a path may take several substeps.  The substep
length is chosen from the current state so that the per-substep log-variance
of every coordinate and of the deflator stays below ``max_log_var``; the
intermediate Brownian values are sampled from the bridge pinned to the mesh
increment, so the recorded ``dW`` is exactly the increment that drove the
path.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, SimulationAbort, UsageError
from .models import CoefficientField


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``max_log_var`` is the substep variance target; ``None`` disables
    substepping so every path moves once per mesh interval.  The scheme's
    weak error grows roughly linearly in it: the default 0.01 keeps the
    localized two-asset estimate within about 0.1% of its exact value,
    0.04 overstates it by about 0.5%.  ``min_substep`` (relative to the
    mesh step) bounds how small a substep may become; a path whose weights
    collapse below that resolution then trips ``hard_cap`` and aborts.
    ``freeze_weight`` stops a path as soon as its smallest market weight
    drops below the given level (estimators localize there anyway, so the
    remaining substeps would be wasted); ``None`` never freezes.
    ``coarsen`` draws the Brownian motion on a mesh ``coarsen`` times finer
    and sums it back: a run with ``(steps, coarsen) = (m, 2)`` sees exactly
    the Brownian path of the run with ``(2m, 1)`` at every common mesh time.
    """

    T: float
    steps: int
    n_paths: int
    seed: int
    scheme: str = "log-euler"
    max_log_var: float | None = 0.01
    hard_cap: float = 5.0
    min_substep: float = 1e-14
    block_size: int = 8192
    antithetic: bool = False
    workers: int = 1
    freeze_weight: float | None = None
    coarsen: int = 1

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigurationError(f"horizon must be positive, got {self.T}")
        if self.steps < 1 or self.n_paths < 1:
            raise ConfigurationError("need steps >= 1 and n_paths >= 1")
        if self.scheme != "log-euler":
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.max_log_var is not None and self.max_log_var <= 0:
            raise ConfigurationError("max_log_var must be positive or None")
        if self.block_size < 2 or self.workers < 1:
            raise ConfigurationError("block_size >= 2 and workers >= 1 required")
        if self.freeze_weight is not None and not 0.0 < self.freeze_weight < 1.0:
            raise ConfigurationError("freeze_weight must lie in (0, 1) or be None")
        if self.antithetic and self.block_size % 2:
            raise ConfigurationError("antithetic sampling needs an even block size")
        if int(self.coarsen) != self.coarsen or self.coarsen < 1:
            raise ConfigurationError("coarsen must be a positive integer")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class PathBundle:
    """Simulated trajectories on the mesh ``t_k = k * dt``.

    ``abort_step[p]`` is the first mesh index whose state path ``p`` failed
    to reach (``steps + 1`` when it never aborted); after an abort the
    path's state is frozen.  ``min_weight[p, k]`` is the running minimum of
    the smallest market weight up to ``t_k``, including substeps.
    """

    times: np.ndarray
    X: np.ndarray
    dW: np.ndarray
    logL: np.ndarray
    min_weight: np.ndarray
    abort_step: np.ndarray
    x0: np.ndarray
    substeps: np.ndarray
    seed: int
    frozen_step: np.ndarray | None = None
    logZ: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[2]

    @property
    def steps(self) -> int:
        return self.times.size - 1

    def valid(self, k: int | None = None) -> np.ndarray:
        """Mask of paths that have not aborted by mesh index ``k`` (default: the end)."""
        k = self.steps if k is None else k
        return self.abort_step > k

    def active(self, k: int | None = None) -> np.ndarray:
        """Mask of paths neither aborted nor frozen by mesh index ``k``."""
        k = self.steps if k is None else k
        ok = self.abort_step > k
        if self.frozen_step is not None:
            ok &= self.frozen_step > k
        return ok

    @property
    def n_aborted(self) -> int:
        return int(np.sum(self.abort_step <= self.steps))

    def total(self) -> np.ndarray:
        """Total capitalization ``X(t_k)``, shape ``(N, m+1)``."""
        return np.sum(self.X, axis=-1)

    def with_wealth(self, logZ: np.ndarray) -> "PathBundle":
        return replace(self, logZ=logZ)


def _block_rngs(seed: int, block: int) -> tuple[np.random.Generator, np.random.Generator]:
    main = np.random.SeedSequence(seed, spawn_key=(block,))
    bridge = np.random.SeedSequence(seed, spawn_key=(block, 1))
    return (np.random.Generator(np.random.Philox(main)),
            np.random.Generator(np.random.Philox(bridge)))


def _initial_states(x, n: int, n_paths: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.size != n:
            raise DomainError(f"initial configuration must have {n} entries")
        x = np.broadcast_to(x, (n_paths, n))
    elif x.shape != (n_paths, n):
        raise DomainError(f"per-path initial states must have shape {(n_paths, n)}, got {x.shape}")
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("initial configuration must lie in the open positive orthant")
    return x


def _coefficients(f: CoefficientField, y: np.ndarray):
    vol = f._vol(y)
    th = np.broadcast_to(f._theta(y), y.shape)
    if f.diagonal:
        vol = np.broadcast_to(vol, y.shape)
        a_ii = vol * vol
        b = vol * th
    else:
        a_ii = np.sum(vol * vol, axis=-1)
        b = np.einsum("pij,pj->pi", vol, th)
    return vol, th, a_ii, b


def _simulate_block(f: CoefficientField, x0: np.ndarray, cfg: SimConfig, block: int) -> PathBundle:
    B, n = x0.shape
    m, dt = cfg.steps, cfg.dt
    rng, brng = _block_rngs(cfg.seed, block)
    v = cfg.max_log_var
    h_min = cfg.min_substep * dt
    fw = cfg.freeze_weight

    c = cfg.coarsen
    if cfg.antithetic:
        half = rng.standard_normal((m * c, B // 2, n))
        z = np.concatenate([half, -half], axis=1)
    else:
        z = rng.standard_normal((m * c, B, n))
    if c > 1:
        z = z.reshape(m, c, B, n).sum(axis=1) / math.sqrt(c)
    dW_rec = np.ascontiguousarray(np.swapaxes(z, 0, 1)) * math.sqrt(dt)

    X = np.full((B, m + 1, n), np.nan)
    logL_rec = np.full((B, m + 1), np.nan)
    minw_rec = np.full((B, m + 1), np.nan)
    X[:, 0] = x0
    logL_rec[:, 0] = 0.0
    minw_rec[:, 0] = np.min(x0 / np.sum(x0, axis=-1, keepdims=True), axis=-1)
    abort = np.full(B, m + 1, dtype=np.int64)
    frozen = np.full(B, m + 1, dtype=np.int64)
    nsub = np.zeros(B, dtype=np.int64)

    # Every path walks through its own mesh intervals; ``kp`` is the
    # interval a path is currently in and ``s``/``w`` the elapsed time and
    # Brownian increment inside it.
    idx = np.arange(B)
    kp = np.zeros(B, dtype=np.int64)
    lx = np.log(x0)
    ll = np.zeros(B)
    mw = minw_rec[:, 0].copy()
    s = np.zeros(B)
    w = np.zeros((B, n))
    Wk = dW_rec[:, 0].copy()
    while idx.size:
        y = np.exp(lx)
        vol, th, a_ii, b = _coefficients(f, y)
        if not (np.all(np.isfinite(vol)) and np.all(np.isfinite(th))):
            bad = ~(np.all(np.isfinite(vol.reshape(idx.size, -1)), axis=1)
                    & np.all(np.isfinite(th), axis=1))
            raise SimulationAbort(
                "non-finite coefficient evaluation",
                {"steps": kp[bad][:10].tolist(),
                 "paths": (block * cfg.block_size + idx[bad]).tolist()[:10],
                 "states": y[bad][:10].tolist()},
            )
        drift = b - 0.5 * a_ii
        th2 = np.sum(th * th, axis=-1)
        rem = dt - s
        dw = Wk - w
        if v is None:
            final = np.ones(idx.size, dtype=bool)
            h = rem
        else:
            var_rate = np.maximum(np.max(a_ii, axis=-1), th2)
            drift_rate = np.maximum(np.max(np.abs(drift), axis=-1), 0.5 * th2)
            with np.errstate(divide="ignore"):
                h_ok = np.minimum(v / var_rate, math.sqrt(v) / drift_rate)
            h_ok = np.maximum(h_ok, h_min)
            final = h_ok >= rem * (1.0 - 1e-9)
            h = np.where(final, rem, h_ok)
            part = np.flatnonzero(~final)
            if part.size:
                # Brownian bridge pinned at the mesh increment
                r = rem[part]
                frac = (h[part] / r)[:, None]
                sd = np.sqrt(h[part] * (r - h[part]) / r)[:, None]
                dw[part] = dw[part] * frac + sd * brng.standard_normal((part.size, n))
        if f.diagonal:
            dlx = drift * h[:, None] + vol * dw
        else:
            dlx = drift * h[:, None] + np.einsum("pij,pj->pi", vol, dw)
        bad = np.any(np.abs(dlx) > cfg.hard_cap, axis=-1) | ~np.all(np.isfinite(dlx), axis=-1)
        ok = ~bad
        if np.all(ok):
            lx = lx + dlx
            ll = ll - np.sum(th * dw, axis=-1) - 0.5 * th2 * h
        else:
            lx = np.where(ok[:, None], lx + dlx, lx)
            ll = np.where(ok, ll - np.sum(th * dw, axis=-1) - 0.5 * th2 * h, ll)
        yw = np.exp(lx - np.max(lx, axis=-1, keepdims=True))
        yw /= np.sum(yw, axis=-1, keepdims=True)
        mw = np.minimum(mw, np.min(yw, axis=-1))
        nsub[idx] += 1
        s = s + h
        w = w + dw

        stop = bad.copy()
        if fw is not None:
            fz = (mw < fw) & ok
            stop |= fz
            if np.any(fz):
                frozen[idx[fz]] = kp[fz] + 1
        if np.any(bad):
            abort[idx[bad]] = kp[bad] + 1

        crossed = final & ok
        rec = crossed | stop
        if np.any(rec):
            # record the state at the end of the interval (or where the path stopped)
            g, k1 = idx[rec], kp[rec] + 1
            X[g, k1] = np.exp(lx[rec])
            logL_rec[g, k1] = ll[rec]
            minw_rec[g, k1] = mw[rec]
        if np.any(crossed):
            kp = kp + crossed
            s = np.where(crossed, 0.0, s)
            w[crossed] = 0.0
            more = crossed & (kp < m)
            Wk[more] = dW_rec[idx[more], kp[more]]
        leave = stop | (kp >= m)
        if np.any(leave):
            keep = ~leave
            idx, kp, lx, ll, mw, s, w, Wk = (idx[keep], kp[keep], lx[keep], ll[keep], mw[keep],
                                             s[keep], w[keep], Wk[keep])

    # stopped paths keep their last state for the rest of the mesh
    for k in range(1, m + 1):
        gap = np.isnan(logL_rec[:, k])
        if np.any(gap):
            X[gap, k] = X[gap, k - 1]
            logL_rec[gap, k] = logL_rec[gap, k - 1]
            minw_rec[gap, k] = minw_rec[gap, k - 1]

    return PathBundle(times=cfg.times, X=X, dW=dW_rec, logL=logL_rec, min_weight=minw_rec,
                      abort_step=abort, x0=np.array(x0), substeps=nsub, seed=cfg.seed,
                      frozen_step=frozen)


def _blocks(n_paths: int, block_size: int) -> list[tuple[int, int, int]]:
    out = []
    for b, start in enumerate(range(0, n_paths, block_size)):
        out.append((b, start, min(start + block_size, n_paths)))
    return out


def map_blocks(f: CoefficientField, x, cfg: SimConfig,
               reducer: Callable[[PathBundle, int], object]) -> list:
    """Simulate block by block and apply ``reducer(bundle, first_path)`` to each block.

    ``first_path`` is the global index of the block's first path.  Results
    come back in block order regardless of ``cfg.workers``, so any
    reduction that combines them in list order is reproducible.
    """
    x0 = _initial_states(x, f.n, cfg.n_paths)
    blocks = _blocks(cfg.n_paths, cfg.block_size)
    if cfg.antithetic and any((hi - lo) % 2 for _, lo, hi in blocks):
        raise ConfigurationError("antithetic sampling needs an even number of paths in every block")

    def work(item):
        b, lo, hi = item
        return reducer(_simulate_block(f, np.ascontiguousarray(x0[lo:hi]), cfg, b), lo)

    if cfg.workers == 1 or len(blocks) == 1:
        return [work(item) for item in blocks]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(work, blocks))


def _concat(bundles: Sequence[PathBundle]) -> PathBundle:
    first = bundles[0]
    if len(bundles) == 1:
        return first
    cat = lambda name: np.concatenate([getattr(bd, name) for bd in bundles])  # noqa: E731
    return PathBundle(times=first.times, X=cat("X"), dW=cat("dW"), logL=cat("logL"),
                      min_weight=cat("min_weight"), abort_step=cat("abort_step"),
                      x0=cat("x0"), substeps=cat("substeps"), seed=first.seed,
                      frozen_step=cat("frozen_step"))


def simulate(f: CoefficientField, x, cfg: SimConfig) -> PathBundle:
    """Simulate ``cfg.n_paths`` trajectories of the capitalizations and deflator.

    ``x`` is a single initial configuration ``(n,)`` or one per path ``(N, n)``.
    """
    return _concat(map_blocks(f, x, cfg, lambda bd, lo: bd))


def market_weights(bundle: PathBundle) -> np.ndarray:
    """Market weights ``mu_i = X_i / sum_j X_j`` of every path at every mesh time."""
    return bundle.X / np.sum(bundle.X, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# investment rules and wealth


@dataclass(frozen=True)
class InvestmentRule:
    """Proportions of wealth ``pi(t, y)`` held in each asset (the rest in cash).

    ``evaluator`` is vectorized: ``y`` has shape ``(N, n)`` and the result
    ``(N, n)``.
    """

    evaluator: Callable[[float, np.ndarray], np.ndarray]
    bounded: bool = False
    portfolio: bool = False
    long_only: bool = False
    name: str = "custom"

    def __call__(self, t: float, y: np.ndarray) -> np.ndarray:
        return np.asarray(self.evaluator(t, y), dtype=float)

    def check_flags(self, t: float, y: np.ndarray, tol: float = 1e-10) -> dict[str, bool]:
        """Compare the declared flags with the evaluator on sampled states."""
        pi = self(t, np.asarray(y, dtype=float))
        found = {
            "portfolio": bool(np.all(np.abs(np.sum(pi, axis=-1) - 1.0) < tol)),
            "long_only": bool(np.all(pi >= -tol)),
            "finite": bool(np.all(np.isfinite(pi))),
        }
        found["consistent"] = (found["finite"]
                               and (not self.portfolio or found["portfolio"])
                               and (not self.long_only or found["long_only"]))
        return found


def market_portfolio() -> InvestmentRule:
    def ev(t, y):
        return y / np.sum(y, axis=-1, keepdims=True)
    return InvestmentRule(ev, bounded=True, portfolio=True, long_only=True, name="market")


def constant_rule(weights) -> InvestmentRule:
    wts = np.asarray(weights, dtype=float)

    def ev(t, y):
        return np.broadcast_to(wts, y.shape)
    total = float(np.sum(wts))
    return InvestmentRule(ev, bounded=True, portfolio=abs(total - 1.0) < 1e-12,
                          long_only=bool(np.all(wts >= 0)), name="constant")


def wealth_path(bundle: PathBundle, rule: InvestmentRule, v: float) -> np.ndarray:
    """Log-wealth of ``rule`` started from ``v``, driven by the bundle's own paths.

    The rule is rebalanced at every mesh time: over ``[t_k, t_{k+1}]`` the
    wealth earns ``sum_i pi_i(t_k, X(t_k)) (X_i(t_{k+1}) / X_i(t_k) - 1)``.
    This is the self-financing update for the same randomness that moved
    the market, so holding the market weights reproduces ``v X(t) / X(0)``.
    A non-positive update (ruin) yields ``-inf`` from then on.
    """
    if not (v > 0 and math.isfinite(v)):
        raise UsageError(f"initial wealth must be positive, got {v}")
    N, m1, n = bundle.X.shape
    logZ = np.empty((N, m1))
    logZ[:, 0] = math.log(v)
    for k in range(m1 - 1):
        y = bundle.X[:, k]
        pi = rule(float(bundle.times[k]), y)
        if not np.all(np.isfinite(pi)):
            bad = np.flatnonzero(~np.all(np.isfinite(pi), axis=-1))
            raise SimulationAbort("investment rule returned non-finite proportions",
                                  {"step": k, "paths": bad[:10].tolist(), "states": y[bad][:10].tolist()})
        growth = 1.0 + np.sum(pi * (bundle.X[:, k + 1] / y - 1.0), axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            logZ[:, k + 1] = np.where(growth > 0, logZ[:, k] + np.log(np.where(growth > 0, growth, 1.0)),
                                      -np.inf)
    return logZ


def bundle_csv_rows(bundle: PathBundle) -> Iterable[list[str]]:
    n = bundle.n
    header = ["t"] + [f"X_{i + 1}" for i in range(n)] + ["logL"]
    if bundle.logZ is not None:
        header.append("logZ")
    yield header
    fmt = lambda v: format(float(v), ".17g")  # noqa: E731
    for p in range(bundle.n_paths):
        for k, t in enumerate(bundle.times):
            row = [fmt(t)] + [fmt(v) for v in bundle.X[p, k]] + [fmt(bundle.logL[p, k])]
            if bundle.logZ is not None:
                row.append(fmt(bundle.logZ[p, k]))
            yield row


def write_bundle_csv(bundle: PathBundle, path) -> None:
    """Write one row per (path, t_k) in path-major order."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in bundle_csv_rows(bundle):
            fh.write(",".join(row) + "\n")
