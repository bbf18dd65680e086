"""Log-uniform spatial grids and time-sliced grid functions.

A :class:`GridFunction` stores ``u(t_j, x)`` on the nodes of a
:class:`SpatialGrid` for an increasing sequence of times ``t_j`` (time to
maturity).  Off-grid values are obtained by multilinear interpolation in
``log x`` and linear interpolation in ``t``; queries outside the box are
clamped to its faces.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ConfigurationError, DomainError, UsageError


@dataclass(frozen=True)
class SpatialGrid:
    """Tensor grid on ``[x_lo, x_hi]^n`` with nodes uniform in ``log x``."""

    n: int
    x_lo: float
    x_hi: float
    nodes: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ConfigurationError(f"grids support n in {{1, 2}}, got {self.n}")
        if not (0.0 < self.x_lo < self.x_hi and math.isfinite(self.x_hi)):
            raise ConfigurationError(f"need 0 < x_lo < x_hi < inf, got {self.x_lo}, {self.x_hi}")
        if int(self.nodes) != self.nodes or self.nodes < 3:
            raise ConfigurationError(f"need at least 3 nodes per axis, got {self.nodes}")

    @property
    def z(self) -> np.ndarray:
        """Log-coordinates of the nodes along one axis."""
        return np.linspace(math.log(self.x_lo), math.log(self.x_hi), self.nodes)

    @property
    def axis(self) -> np.ndarray:
        """Node positions along one axis (endpoints exact)."""
        x = np.exp(self.z)
        x[0], x[-1] = self.x_lo, self.x_hi
        return x

    @property
    def h(self) -> float:
        """Spacing in log-coordinates."""
        return (math.log(self.x_hi) - math.log(self.x_lo)) / (self.nodes - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nodes,) * self.n

    def points(self) -> np.ndarray:
        """All nodes, shape ``(*shape, n)`` with ``ij`` indexing."""
        return np.stack(np.meshgrid(*([self.axis] * self.n), indexing="ij"), axis=-1)

    def interior_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[(slice(1, -1),) * self.n] = True
        return m

    def boundary_mask(self) -> np.ndarray:
        return ~self.interior_mask()

    def locate(self, y) -> tuple[np.ndarray, np.ndarray]:
        """Lower cell index and fractional position of each coordinate (clamped)."""
        z = np.log(np.asarray(y, dtype=float))
        t = (z - math.log(self.x_lo)) / self.h
        t = np.clip(t, 0.0, self.nodes - 1)
        i = np.minimum(np.floor(t).astype(np.int64), self.nodes - 2)
        return i, t - i

    def contains(self, y, tol: float = 1e-12) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.all((y >= self.x_lo * (1 - tol)) & (y <= self.x_hi * (1 + tol)), axis=-1)

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "x_lo": self.x_lo, "x_hi": self.x_hi, "nodes": self.nodes}


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass(frozen=True)
class GridFunction:
    """Values ``values[j]`` of a function at time ``times[j]`` on ``grid``.

    ``se`` optionally carries pointwise standard errors (for functions
    fitted from Monte-Carlo estimates); ``meta`` holds provenance.
    """

    grid: SpatialGrid
    times: np.ndarray
    values: np.ndarray
    se: np.ndarray | None = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", vals)
        if t.ndim != 1 or t.size < 1 or np.any(np.diff(t) <= 0):
            raise ConfigurationError("times must be a non-empty strictly increasing vector")
        if vals.shape != (t.size,) + self.grid.shape:
            raise ConfigurationError(f"values must have shape {(t.size,) + self.grid.shape}, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("grid function values must be finite")
        if self.se is not None:
            se = np.asarray(self.se, dtype=float)
            if se.shape != vals.shape:
                raise ConfigurationError("se must match values in shape")
            object.__setattr__(self, "se", se)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def _time_weights(self, t: float) -> tuple[int, int, float]:
        ts = self.times
        if t <= ts[0]:
            return 0, 0, 0.0
        if t >= ts[-1]:
            return ts.size - 1, ts.size - 1, 0.0
        j = int(np.searchsorted(ts, t, side="right")) - 1
        lam = (t - ts[j]) / (ts[j + 1] - ts[j])
        return j, j + 1, float(lam)

    def _spatial(self, field_: np.ndarray, y: np.ndarray) -> np.ndarray:
        i, f = self.grid.locate(y)
        out = np.zeros(y.shape[:-1])
        for corner in itertools.product((0, 1), repeat=self.grid.n):
            wgt = np.ones(y.shape[:-1])
            index = []
            for ax, c in enumerate(corner):
                wgt = wgt * (f[..., ax] if c else 1.0 - f[..., ax])
                index.append(i[..., ax] + c)
            out = out + wgt * field_[tuple(index)]
        return out

    def _interp(self, arr: np.ndarray, t: float, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.grid.n:
            raise DomainError(f"expected states of dimension {self.grid.n}")
        if np.any(y <= 0) or not np.all(np.isfinite(y)):
            raise DomainError("states must lie in the open positive orthant")
        j0, j1, lam = self._time_weights(float(t))
        lo = self._spatial(arr[j0], y)
        if j1 == j0 or lam == 0.0:
            return lo
        return (1.0 - lam) * lo + lam * self._spatial(arr[j1], y)

    def __call__(self, t: float, y) -> np.ndarray:
        """Interpolated value at time ``t`` for states ``y`` of shape ``(..., n)``."""
        return self._interp(self.values, t, y)

    def stderr(self, t: float, y) -> np.ndarray:
        """Interpolated standard error (zero when none is stored)."""
        if self.se is None:
            return np.zeros(np.asarray(y).shape[:-1])
        return self._interp(self.se, t, y)

    def slice_at(self, t: float) -> np.ndarray:
        """Node values at time ``t`` (linear in time between stored slices)."""
        j0, j1, lam = self._time_weights(float(t))
        return (1.0 - lam) * self.values[j0] + lam * self.values[j1]

    def with_meta(self, **meta) -> "GridFunction":
        merged = dict(self.meta)
        merged.update(meta)
        return GridFunction(self.grid, self.times, self.values, self.se, merged)

    # -- serialization -----------------------------------------------------

    def to_csv_text(self) -> str:
        n = self.grid.n
        buf = io.StringIO()
        header = ["t"] + [f"x_{i + 1}" for i in range(n)] + ["u"]
        if self.se is not None:
            header.append("se")
        buf.write(",".join(header) + "\n")
        pts = self.grid.points().reshape(-1, n)
        for j, t in enumerate(self.times):
            vals = self.values[j].reshape(-1)
            ses = None if self.se is None else self.se[j].reshape(-1)
            for p in range(pts.shape[0]):
                row = [_fmt(t)] + [_fmt(c) for c in pts[p]] + [_fmt(vals[p])]
                if ses is not None:
                    row.append(_fmt(ses[p]))
                buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def sidecar(self) -> dict[str, Any]:
        return {"grid": self.grid.to_dict(), "times": len(self.times), "has_se": self.se is not None,
                "meta": _jsonable(self.meta)}

    def write(self, path) -> tuple[Path, Path]:
        """Write ``path`` (CSV) and ``path.json`` (metadata)."""
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_text())
        side = path.with_name(path.name + ".json")
        with open(side, "w", encoding="utf-8", newline="") as fh:
            fh.write(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")
        return path, side

    @classmethod
    def read(cls, path) -> "GridFunction":
        path = Path(path)
        side = path.with_name(path.name + ".json")
        with open(side, encoding="utf-8") as fh:
            info = json.load(fh)
        grid = SpatialGrid(**info["grid"])
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        data = np.array([[float(c) for c in r] for r in body])
        npts = grid.nodes ** grid.n
        if data.shape[0] != info["times"] * npts:
            raise UsageError("row count does not match the sidecar metadata")
        times = data[::npts, 0]
        ucol = grid.n + 1
        values = data[:, ucol].reshape((len(times),) + grid.shape)
        se = data[:, ucol + 1].reshape(values.shape) if info.get("has_se") else None
        if header[ucol] != "u":
            raise UsageError(f"unexpected CSV header {header}")
        return cls(grid, times, values, se, info.get("meta", {}))


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
