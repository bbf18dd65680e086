"""Batch front-end: TOML configuration in, CSV/JSON artifacts out.

Usage::

    robustarb --config run.toml --out results/ [--seed N] [--workers N]
              [--tolerance-profile strict|default]
    robustarb reproduce manifest.json [--workers N]
    robustarb record --config run.toml --out manifest.json [--seed N]

Exit status: 0 on success, 1 on a configuration error (nothing is
written), 2 when a diagnostic is outside tolerance or a reproduced digest
differs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import __version__
from . import estimators as est
from . import hedging, hjb
from .errors import ConfigurationError, RobustArbError
from .grid import GridFunction, SpatialGrid, _jsonable
from .models import (UncertaintySet, check_assumptions, check_linear_growth, check_strong_arbitrage,
                     compile_expression, constant_field, gvsm_field, gvsm_uncertainty,
                     singleton_uncertainty, vsm_field, vsm_uncertainty)
from .sde import SimConfig, constant_rule, market_portfolio, simulate, wealth_path, write_bundle_csv

COMMANDS = ("simulate", "estimate", "solve", "hedge", "check")
STOCHASTIC = set(COMMANDS) - {"check"}

# allowed keys per table; nested tables are validated separately
SCHEMA: dict[str, set[str]] = {
    "": {"command", "seed", "model", "sim", "grid", "simulate", "estimate", "solve", "hedge", "check"},
    "model": {"family", "n", "gamma1", "gamma2", "kappa", "gammas", "G", "G_homogeneous", "s", "theta"},
    "sim": {"T", "steps", "n_paths", "max_log_var", "hard_cap", "block_size", "antithetic", "weight_floor"},
    "grid": {"x_lo", "x_hi", "nodes"},
    "simulate": {"x", "rule", "v"},
    "estimate": {"x", "T", "phi_hat", "param_points"},
    "solve": {"T", "boundary", "paths_per_node", "first_order", "cfl_safety", "n_slices", "dt"},
    "hedge": {"T", "x", "eps", "solution", "refine"},
    "check": {"diagnostics", "x", "T", "checkpoints", "tau", "inner_nodes", "inner_x_lo", "inner_x_hi",
              "inner_paths", "sample_lo", "sample_hi", "sample_points", "growth_bound"},
}

TOLERANCES = {
    "default": {"z": 3.0, "growth_bound": 10.0},
    "strict": {"z": 2.0, "growth_bound": 5.0},
}


def _fail(msg: str):
    raise ConfigurationError(msg)


def validate_keys(cfg: Mapping[str, Any]) -> None:
    """Reject any key not in the schema (before any computation)."""
    for key, val in cfg.items():
        if key not in SCHEMA[""]:
            _fail(f"unknown top-level key {key!r}")
        if key in SCHEMA and key != "":
            if not isinstance(val, Mapping):
                _fail(f"[{key}] must be a table")
            for sub in val:
                if sub not in SCHEMA[key]:
                    _fail(f"unknown key {sub!r} in [{key}]")


def _interval(v, name: str) -> tuple[float, float]:
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v), float(v)
    if isinstance(v, list) and len(v) == 2 and all(isinstance(e, (int, float)) for e in v):
        return float(v[0]), float(v[1])
    _fail(f"{name} must be a number or a [lo, hi] pair")


def build_model(spec: Mapping[str, Any]) -> UncertaintySet:
    """Model table -> uncertainty set (a singleton when every parameter is a number)."""
    family = spec.get("family")
    if "n" not in spec:
        _fail("[model] needs n")
    n = spec["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        _fail("[model] n must be a positive integer")
    if family == "vsm":
        g1 = _interval(spec.get("gamma1", 1.0), "gamma1")
        g2 = _interval(spec.get("gamma2", 1.0), "gamma2")
        if g1[0] == g1[1] and g2[0] == g2[1]:
            return singleton_uncertainty(vsm_field(n, g1[0], g2[0]))
        if g2[0] != 1.0:
            _fail("the gamma2 interval must start at 1")
        return vsm_uncertainty(n, g1[0], g1[1], g2[1])
    if family == "gvsm":
        if "kappa" not in spec or "gammas" not in spec:
            _fail("gvsm needs kappa and gammas")
        gammas = [_interval(g, "gammas") for g in spec["gammas"]]
        if len(gammas) != n + 1:
            _fail(f"gvsm needs n+1 = {n + 1} gammas")
        G = spec.get("G", 1.0)
        if isinstance(G, str):
            G = compile_expression(G, n)
        hom = spec.get("G_homogeneous")
        if all(lo == hi for lo, hi in gammas):
            return singleton_uncertainty(gvsm_field(n, spec["kappa"], [g[0] for g in gammas], G, hom))
        if gammas[n][0] != 1.0:
            _fail("the volatility-scale interval must start at 1")
        return gvsm_uncertainty(n, spec["kappa"], gammas[:n], gammas[n][1], G, hom)
    if family == "constant":
        if "s" not in spec or "theta" not in spec:
            _fail("constant model needs s and theta")
        f = constant_field(spec["s"], spec["theta"])
        if f.n != n:
            _fail("constant model: n does not match s")
        return singleton_uncertainty(f)
    _fail(f"unknown model family {family!r} (expected vsm, gvsm or constant)")


@dataclass(frozen=True)
class RunConfig:
    command: str
    raw: Mapping[str, Any]
    model: UncertaintySet
    sim: SimConfig
    weight_floor: float | None
    grid: SpatialGrid | None
    seed: int | None
    out: Path
    tolerance: Mapping[str, float]
    base_dir: Path


def _sim_config(spec: Mapping[str, Any], seed: int | None, workers: int) -> tuple[SimConfig, float | None]:
    kw = {k: spec[k] for k in ("T", "steps", "n_paths", "max_log_var", "hard_cap", "block_size", "antithetic")
          if k in spec}
    kw.setdefault("T", 1.0)
    kw.setdefault("steps", 50)
    kw.setdefault("n_paths", 10000)
    floor = spec.get("weight_floor", est.DEFAULT_WEIGHT_FLOOR)
    if floor is not None and not (isinstance(floor, (int, float)) and 0 < floor < 1):
        _fail("weight_floor must lie in (0, 1)")
    return SimConfig(seed=0 if seed is None else seed, workers=workers, **kw), floor


def load_config(path, out, seed: int | None = None, workers: int = 1,
                profile: str = "default") -> RunConfig:
    """Parse and fully validate a configuration file."""
    path = Path(path)
    if not path.is_file():
        _fail(f"configuration file {path} does not exist")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        _fail(f"cannot parse {path}: {exc}")
    validate_keys(raw)
    command = raw.get("command")
    if command not in COMMANDS:
        _fail(f"command must be one of {COMMANDS}, got {command!r}")
    if profile not in TOLERANCES:
        _fail(f"unknown tolerance profile {profile!r}")
    if workers < 1:
        _fail("workers must be >= 1")
    seed = raw.get("seed") if seed is None else seed
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
        _fail("seed must be a nonnegative integer")
    needs_seed = command in STOCHASTIC or (command == "check" and set(
        raw.get("check", {}).get("diagnostics", CHECK_DEFAULT)) & {"martingale", "dpp", "drift"})
    if needs_seed and seed is None:
        _fail(f"a seed is mandatory for the stochastic command {command!r}")
    if "model" not in raw:
        _fail("missing [model] table")
    model = build_model(raw["model"])
    sim, floor = _sim_config(raw.get("sim", {}), seed, workers)
    grid = None
    if "grid" in raw:
        g = raw["grid"]
        if set(g) != SCHEMA["grid"]:
            _fail("[grid] needs x_lo, x_hi and nodes")
        grid = SpatialGrid(model.n, float(g["x_lo"]), float(g["x_hi"]), int(g["nodes"]))
    if command == "hedge" and "solution" in raw.get("hedge", {}):
        sol = (path.parent / raw["hedge"]["solution"])
        if not sol.is_file() or not sol.with_name(sol.name + ".json").is_file():
            _fail(f"solution file {sol} (with .json sidecar) does not exist")
    if command in ("solve", "hedge") and grid is None and not (command == "hedge" and "solution" in raw.get("hedge", {})):
        _fail(f"command {command!r} needs a [grid] table")
    return RunConfig(command, raw, model, sim, floor, grid, seed, Path(out), TOLERANCES[profile], path.parent)


CHECK_DEFAULT = ("strong_arbitrage", "linear_growth", "assumptions", "martingale", "dpp", "drift")


# ---------------------------------------------------------------------------
# commands


def _provenance(rc: RunConfig) -> dict[str, Any]:
    return {"command": rc.command, "model": rc.raw.get("model", {}), "seed": rc.seed,
            "sim": rc.raw.get("sim", {}), "grid": rc.raw.get("grid"), "version": __version__}


def _points(v, n: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n:
        _fail(f"{name} must be a point or a list of points of dimension {n}")
    if np.any(arr <= 0):
        _fail(f"{name} must lie in the open positive orthant")
    return arr


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=True) + "\n")


def _cmd_simulate(rc: RunConfig) -> int:
    spec = rc.raw.get("simulate", {})
    n = rc.model.n
    x = _points(spec.get("x", [1.0] * n), n, "[simulate] x")[0]
    f = rc.model.base
    bundle = simulate(f, x, rc.sim)
    rule_name = spec.get("rule")
    if rule_name is not None:
        rules = {"market": market_portfolio(), "cash": constant_rule(np.zeros(n))}
        if rule_name not in rules:
            _fail(f"[simulate] rule must be one of {sorted(rules)}")
        v = float(spec.get("v", float(np.sum(x))))
        bundle = bundle.with_wealth(wealth_path(bundle, rules[rule_name], v))
    write_bundle_csv(bundle, rc.out / "paths.csv")
    _write_json(rc.out / "summary.json", {"provenance": _provenance(rc), "n_aborted": bundle.n_aborted,
                                          "paths": bundle.n_paths, "steps": bundle.steps})
    return 0


def _cmd_estimate(rc: RunConfig) -> int:
    spec = rc.raw.get("estimate", {})
    n = rc.model.n
    xs = _points(spec.get("x", [1.0] * n), n, "[estimate] x")
    Ts = spec.get("T", rc.sim.T)
    Ts = [float(t) for t in (Ts if isinstance(Ts, list) else [Ts])]
    reports = []
    for T in Ts:
        for x in xs:
            if spec.get("phi_hat", not rc.model.is_singleton()):
                r = est.estimate_Phi_hat(rc.model, T, x, rc.sim, points=int(spec.get("param_points", 5)),
                                         weight_floor=rc.weight_floor)
                reports.extend(r.estimates)
                reports.append(r.best)
            else:
                reports.append(est.estimate_u_M(rc.model.base, T, x, rc.sim, rc.weight_floor))
    est.write_reports_csv(reports, rc.out / "estimates.csv")
    flagged = [r.row() for r in reports if r.flagged]
    _write_json(rc.out / "summary.json", {"provenance": _provenance(rc),
                                          "estimates": [r.row() for r in reports], "flagged": flagged})
    return 2 if flagged else 0


def _solve(rc: RunConfig) -> GridFunction:
    spec = rc.raw.get("solve", {})
    T = float(spec.get("T", rc.sim.T))
    kind = spec.get("boundary", "mc")
    if kind == "constant":
        closure = hjb.ConstantBoundary(1.0)
    elif kind == "mc":
        closure = hjb.mc_boundary(rc.model, rc.grid, T, rc.sim.with_(T=T), int(spec.get("paths_per_node", 2000)),
                                  weight_floor=rc.weight_floor)
    else:
        _fail("[solve] boundary must be 'mc' or 'constant'")
    prob = hjb.HJBProblem(rc.model, closure, T, rc.grid, cfl_safety=float(spec.get("cfl_safety", 0.9)),
                          dt=spec.get("dt"), first_order=spec.get("first_order", "upwind"),
                          n_slices=int(spec.get("n_slices", 201)))
    sol = hjb.solve(prob)
    return sol.with_meta(provenance=_provenance(rc))


def _cmd_solve(rc: RunConfig) -> int:
    sol = _solve(rc)
    sol.write(rc.out / "solution.csv")
    _write_json(rc.out / "summary.json", {"provenance": _provenance(rc), "T": sol.T, "steps": sol.meta["steps"],
                                          "dt": sol.meta["dt"], "min_value": float(np.min(sol.values))})
    return 0


def _cmd_hedge(rc: RunConfig) -> int:
    spec = rc.raw.get("hedge", {})
    n = rc.model.n
    if "solution" in spec:
        U = GridFunction.read(rc.base_dir / spec["solution"])
    else:
        U = _solve(rc)
    T = float(spec.get("T", U.T))
    x = _points(spec.get("x", [1.0] * n), n, "[hedge] x")[0]
    eps = float(spec.get("eps", 0.04))
    rule = hedging.rule_from_solution(U, T)
    f = rc.model.base
    summary: dict[str, Any] = {"provenance": _provenance(rc), "portfolio_defect": rule.portfolio_defect}
    if spec.get("refine", False):
        ref = hedging.backtest_refinement(rule, f, T, x, rc.sim, eps)
        rep = ref.fine
        summary["coarse"] = ref.coarse.summary()
        summary["shortfall_rate_decreased"] = ref.shortfall_rate_decreased
    else:
        rep = hedging.backtest_superreplication(rule, f, T, x, rc.sim, eps)
    summary["backtest"] = rep.summary()
    summary["relative_return"] = hedging.relative_return_report(rep, float(np.sum(x)))
    rep.write_csv(rc.out / "backtest.csv")
    _write_json(rc.out / "summary.json", summary)
    return 0


def _cmd_check(rc: RunConfig) -> int:
    spec = rc.raw.get("check", {})
    tol = rc.tolerance
    n = rc.model.n
    diags = list(spec.get("diagnostics", CHECK_DEFAULT))
    unknown = set(diags) - set(CHECK_DEFAULT)
    if unknown:
        _fail(f"unknown diagnostics {sorted(unknown)}")
    lo, hi = float(spec.get("sample_lo", 0.1)), float(spec.get("sample_hi", 10.0))
    k = int(spec.get("sample_points", 9))
    axis = np.geomspace(lo, hi, k)
    sample = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), -1).reshape(-1, n) if n <= 3 else \
        np.exp(np.random.default_rng(0).uniform(math.log(lo), math.log(hi), size=(500, n)))
    out: dict[str, Any] = {"provenance": _provenance(rc)}
    ok = True
    if "strong_arbitrage" in diags:
        r = check_strong_arbitrage(rc.model, sample)
        out["strong_arbitrage"] = {"constant": r.constant, "excess_growth_inf": r.excess_growth_inf,
                                   "geometric_inf": r.geometric_inf, "source": r.source, "holds": r.holds}
    if "linear_growth" in diags:
        bound = float(spec.get("growth_bound", tol["growth_bound"]))
        worst, passed = 0.0, True
        for p in rc.model.vertices() or [{}]:
            r = check_linear_growth(rc.model.field_at(p) if p else rc.model.base, sample, bound)
            worst, passed = max(worst, r.worst_ratio), passed and r.passed
        # the growth bound is a tolerance only when the configuration declares it;
        # otherwise (e.g. the volatility-stabilized family, which is not of linear
        # growth near the faces of the orthant) the ratio is reported
        enforced = "growth_bound" in spec
        out["linear_growth"] = {"worst_ratio": worst, "bound": bound, "passed": passed, "enforced": enforced}
        ok &= passed or not enforced
    if "assumptions" in diags:
        r = check_assumptions(rc.model, sample)
        out["assumptions"] = {"max_risk_norm": r.max_risk_norm, "max_cov_norm": r.max_cov_norm,
                              "max_cov_oscillation": r.max_cov_oscillation, "bounded": r.bounded}
    mc = [d for d in diags if d in ("martingale", "dpp", "drift")]
    if mc:
        T = float(spec.get("T", rc.sim.T))
        x = _points(spec.get("x", [1.0] * n), n, "[check] x")[0]
        cfg = rc.sim.with_(T=T)
        inner_grid = None
        if n <= 2:
            inner_grid = SpatialGrid(n, float(spec.get("inner_x_lo", math.exp(-2.5))),
                                     float(spec.get("inner_x_hi", math.exp(2.5))), int(spec.get("inner_nodes", 9)))
        inner_paths = int(spec.get("inner_paths", 500))
        z = tol["z"]
        if "martingale" in diags:
            if inner_grid is None:
                _fail("martingale diagnostic needs n <= 2")
            cps = [float(c) for c in spec.get("checkpoints", [0.0, T / 4, T / 2])]
            r = est.martingale_diagnostic(rc.model.base, T, x, cfg, cps, inner_grid=inner_grid,
                                          inner_paths=inner_paths, weight_floor=rc.weight_floor)
            passed = all(abs(row.z) <= z for row in r.rows) and not r.partial
            out["martingale"] = {**r.summary(), "passed": passed}
            ok &= passed
        if "dpp" in diags:
            if inner_grid is None:
                _fail("DPP diagnostic needs n <= 2")
            tau = float(spec.get("tau", T / 2))
            grid_p = rc.model.vertices() if not rc.model.is_singleton() else None
            r = est.dpp_diagnostic(rc.model, T, x, cfg, tau, inner_grid=inner_grid, inner_paths=inner_paths,
                                   param_grid=grid_p, weight_floor=rc.weight_floor)
            passed = all(abs(row.z) <= z for row in r.rows)
            out["dpp"] = {**r.summary(), "passed": passed}
            ok &= passed
        if "drift" in diags:
            r = est.supersolution_drift_diagnostic(rc.model.base, 1.0, T, x, cfg, rc.weight_floor, k_se=z)
            out["drift"] = r.summary()
            ok &= r.passed
    out["passed"] = bool(ok)
    _write_json(rc.out / "diagnostics.json", out)
    return 0 if ok else 2


HANDLERS = {"simulate": _cmd_simulate, "estimate": _cmd_estimate, "solve": _cmd_solve,
            "hedge": _cmd_hedge, "check": _cmd_check}


def run(config, out, seed: int | None = None, workers: int = 1, profile: str = "default",
        stderr=None) -> int:
    """Run one configuration; returns the exit status."""
    stderr = stderr or sys.stderr
    try:
        rc = load_config(config, out, seed, workers, profile)
    except (ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=stderr)
        return 1
    staging = Path(tempfile.mkdtemp(prefix=".robustarb-", dir=None))
    try:
        code = HANDLERS[rc.command](RunConfig(**{**rc.__dict__, "out": staging}))
    except ConfigurationError as exc:
        shutil.rmtree(staging, ignore_errors=True)
        print(f"configuration error: {exc}", file=stderr)
        return 1
    except RobustArbError as exc:
        shutil.rmtree(staging, ignore_errors=True)
        print(f"run failed: {exc}", file=stderr)
        return 2
    rc.out.mkdir(parents=True, exist_ok=True)
    for p in sorted(staging.iterdir()):
        shutil.move(str(p), rc.out / p.name)
    shutil.rmtree(staging, ignore_errors=True)
    return code


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def record(config, manifest_path, seed: int | None = None, workers: int = 1,
           profile: str = "default") -> int:
    """Run ``config`` and write a manifest with the digest of every artifact."""
    with tempfile.TemporaryDirectory() as tmp:
        code = run(config, tmp, seed, workers, profile)
        if code == 1:
            return 1
        digests = {p.name: sha256_file(p) for p in sorted(Path(tmp).iterdir())}
    manifest = {"config": str(Path(config).resolve()), "seed": seed, "tolerance_profile": profile,
                "exit_code": code, "artifacts": digests}
    with open(manifest_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


@dataclass(frozen=True)
class ReproduceResult:
    code: int
    matches: Mapping[str, bool]
    diff: tuple[str, ...]


def reproduce(manifest, workers: int = 1, seed: int | None = None, stderr=None) -> ReproduceResult:
    """Re-run a recorded experiment and byte-compare its artifacts by SHA-256.

    ``seed`` overrides the recorded seed (a changed seed is expected to be
    reported as a mismatch).
    """
    stderr = stderr or sys.stderr
    try:
        with open(manifest, encoding="utf-8") as fh:
            man = json.load(fh)
        cfg, expected = man["config"], dict(man["artifacts"])
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read manifest: {exc}", file=stderr)
        return ReproduceResult(1, {}, (str(exc),))
    use_seed = man.get("seed") if seed is None else seed
    with tempfile.TemporaryDirectory() as tmp:
        code = run(cfg, tmp, use_seed, workers, man.get("tolerance_profile", "default"), stderr)
        if code == 1:
            return ReproduceResult(1, {}, ("configuration error",))
        got = {p.name: sha256_file(p) for p in Path(tmp).iterdir()}
    matches, diff = {}, []
    for name, digest in sorted(expected.items()):
        ok = got.get(name) == digest
        matches[name] = ok
        if not ok:
            diff.append(f"{name}: expected {digest[:12]}, got {(got.get(name) or 'missing')[:12]}")
    for name in sorted(set(got) - set(expected)):
        diff.append(f"{name}: unexpected artifact")
    return ReproduceResult(0 if not diff else 2, matches, tuple(diff))


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "reproduce":
        ap = argparse.ArgumentParser(prog="robustarb reproduce")
        ap.add_argument("manifest")
        ap.add_argument("--workers", type=int, default=1)
        ap.add_argument("--seed", type=int, default=None)
        a = ap.parse_args(argv[1:])
        res = reproduce(a.manifest, a.workers, a.seed)
        for name, ok in res.matches.items():
            print(f"{'PASS' if ok else 'FAIL'} {name}")
        for line in res.diff:
            print(line)
        return res.code
    if argv and argv[0] == "record":
        ap = argparse.ArgumentParser(prog="robustarb record")
        ap.add_argument("--config", required=True)
        ap.add_argument("--out", required=True, help="manifest path")
        ap.add_argument("--seed", type=int, default=None)
        ap.add_argument("--workers", type=int, default=1)
        ap.add_argument("--tolerance-profile", choices=sorted(TOLERANCES), default="default")
        a = ap.parse_args(argv[1:])
        return record(a.config, a.out, a.seed, a.workers, a.tolerance_profile)
    if argv and argv[0] == "run":
        argv = argv[1:]
    ap = argparse.ArgumentParser(prog="robustarb", description="Run a configured experiment.")
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--tolerance-profile", choices=sorted(TOLERANCES), default="default")
    a = ap.parse_args(argv)
    return run(a.config, a.out, a.seed, a.workers, a.tolerance_profile)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
