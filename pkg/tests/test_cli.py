import csv
import io
import json

import pytest

from robustarb import cli
from robustarb.grid import GridFunction


def _write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


ESTIMATE_T0 = """
command = "estimate"
seed = 1
[model]
family = "vsm"
n = 2
[sim]
T = 1.0
steps = 4
n_paths = 200
[estimate]
x = [[1.0, 1.0], [0.5, 3.0]]
T = 0.0
"""

ESTIMATE = """
command = "estimate"
seed = 5
[model]
family = "vsm"
n = 2
[sim]
T = 0.25
steps = 10
n_paths = 600
block_size = 128
max_log_var = 0.1
[estimate]
x = [1.0, 2.0]
"""


def test_estimate_at_zero_horizon_reports_one(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["--config", str(_write(tmp_path, ESTIMATE_T0)), "--out", str(out)]) == 0
    with open(out / "estimates.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert all(float(r["estimate"]) == 1.0 for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["provenance"]["seed"] == 1 and summary["provenance"]["version"]


def test_check_reports_strong_arbitrage_constant(tmp_path):
    cfg = _write(tmp_path, """
command = "check"
[model]
family = "vsm"
n = 2
[check]
diagnostics = ["strong_arbitrage", "linear_growth"]
""")
    out = tmp_path / "out"
    assert cli.run(cfg, out) == 0
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["strong_arbitrage"]["constant"] == pytest.approx(1.0, abs=1e-12)
    assert diag["passed"] is True


def test_check_exits_two_outside_tolerance(tmp_path):
    cfg = _write(tmp_path, """
command = "check"
[model]
family = "vsm"
n = 1
[check]
diagnostics = ["linear_growth"]
sample_lo = 0.01
growth_bound = 1.5
""")
    out = tmp_path / "out"
    assert cli.run(cfg, out) == 2
    assert json.loads((out / "diagnostics.json").read_text())["linear_growth"]["passed"] is False


@pytest.mark.parametrize("text", [
    ESTIMATE.replace('family = "vsm"', 'family = "vsmm"'),
    ESTIMATE.replace("[estimate]", "[estimate]\nbogus = 1"),
    ESTIMATE + "\nextra = 3\n",
    ESTIMATE.replace("seed = 5\n", ""),
    ESTIMATE.replace('command = "estimate"', 'command = "fly"'),
    ESTIMATE.replace("x = [1.0, 2.0]", "x = [1.0, -2.0]"),
    ESTIMATE.replace("T = 0.25", "T = -1.0"),
])
def test_configuration_errors_exit_one_without_artifacts(tmp_path, text):
    out = tmp_path / "out"
    err = io.StringIO()
    assert cli.run(_write(tmp_path, text), out, stderr=err) == 1
    assert "configuration error" in err.getvalue()
    assert not out.exists()


def test_missing_config_and_solution_files(tmp_path):
    assert cli.run(tmp_path / "nope.toml", tmp_path / "out", stderr=io.StringIO()) == 1
    cfg = _write(tmp_path, """
command = "hedge"
seed = 1
[model]
family = "vsm"
n = 2
[hedge]
solution = "missing.csv"
""")
    assert cli.run(cfg, tmp_path / "out", stderr=io.StringIO()) == 1


def test_seed_flag_overrides_config(tmp_path):
    cfg = _write(tmp_path, ESTIMATE)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run(cfg, a, seed=9) == 0
    assert cli.run(cfg, b) == 0
    assert json.loads((a / "summary.json").read_text())["provenance"]["seed"] == 9
    assert (a / "estimates.csv").read_bytes() != (b / "estimates.csv").read_bytes()


def test_csv_artifacts_use_plain_line_endings(tmp_path):
    out = tmp_path / "out"
    assert cli.run(_write(tmp_path, ESTIMATE), out) == 0
    raw = (out / "estimates.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    raw.decode("utf-8")


def test_simulate_writes_paths(tmp_path):
    cfg = _write(tmp_path, """
command = "simulate"
seed = 3
[model]
family = "constant"
n = 2
s = [[0.2, 0.0], [0.0, 0.3]]
theta = [0.1, 0.0]
[sim]
T = 0.5
steps = 5
n_paths = 4
[simulate]
x = [1.0, 2.0]
rule = "market"
""")
    out = tmp_path / "out"
    assert cli.run(cfg, out) == 0
    assert (out / "paths.csv").stat().st_size > 0
    assert json.loads((out / "summary.json").read_text())["paths"] == 4


def test_solve_then_hedge_from_file(tmp_path):
    cfg = _write(tmp_path, """
command = "solve"
seed = 2
[model]
family = "vsm"
n = 2
[grid]
x_lo = 0.25
x_hi = 4.0
nodes = 9
[solve]
T = 0.2
boundary = "constant"
n_slices = 11
""")
    out = tmp_path / "sol"
    assert cli.run(cfg, out) == 0
    U = GridFunction.read(out / "solution.csv")
    assert U.T == 0.2 and U.values.min() == pytest.approx(1.0, abs=1e-14)
    assert U.meta["provenance"]["command"] == "solve"
    hedge = _write(tmp_path, """
command = "hedge"
seed = 2
[model]
family = "vsm"
n = 2
[sim]
steps = 8
n_paths = 50
max_log_var = 0.1
[hedge]
solution = "sol/solution.csv"
x = [1.0, 1.0]
eps = 1e-12
""", "hedge.toml")
    hout = tmp_path / "hedge"
    assert cli.run(hedge, hout) == 0
    summary = json.loads((hout / "summary.json").read_text())
    # U == 1: the generated rule is the market portfolio, so Z = X (to rounding) on every included path
    assert summary["backtest"]["success_rate"] == 1.0
    assert summary["backtest"]["worst_shortfall"] == pytest.approx(0.0, abs=1e-12)
    assert (hout / "backtest.csv").read_text().startswith("path,Z_T,X_T,ratio,included\n")


def _record(tmp_path, text=ESTIMATE, seed=None):
    cfg = _write(tmp_path, text)
    man = tmp_path / "manifest.json"
    assert cli.record(cfg, man, seed=seed) == 0
    return man


def test_reproduce_is_byte_identical_across_runs_and_workers(tmp_path):
    man = _record(tmp_path)
    data = json.loads(man.read_text())
    assert set(data["artifacts"]) == {"estimates.csv", "summary.json"}
    for workers in (1, 4):
        res = cli.reproduce(man, workers=workers)
        assert res.code == 0 and all(res.matches.values()) and res.diff == ()


def test_reproduce_flags_changed_seed(tmp_path, capsys):
    man = _record(tmp_path)
    assert cli.main(["reproduce", str(man), "--seed", "6"]) == 2
    out = capsys.readouterr().out
    assert "FAIL estimates.csv" in out and "expected" in out


def test_reproduce_rejects_unreadable_manifest(tmp_path):
    bad = tmp_path / "m.json"
    bad.write_text("{}")
    assert cli.reproduce(bad, stderr=io.StringIO()).code == 1
