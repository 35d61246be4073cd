import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfmac import io
from sfmac.cli import main
from sfmac.config import ConfigError, default_config, load_config, validate
from sfmac.fluid import FluidTrajectory
from sfmac.harness import RunConfig, run, sweep
from sfmac.model import ArrivalProcess
from sfmac.protocols import A1, A2, HFunction

SMALL_RUN = {"horizon": 20_000, "replications": 3, "stride": 10, "N0": 500, "S0": 500.0}


# -- csv --------------------------------------------------------------------

@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=50))
def test_float_round_trip_is_exact(values):
    for v in values:
        assert float(io.fmt(v)) == v


def test_trajectory_round_trip(tmp_path):
    t = np.linspace(0, 1, 11)
    traj = FluidTrajectory(t, np.sqrt(t) / 3, np.exp(-t) / 7, "converged", 1.0)
    path = io.write_trajectory(tmp_path / "t.csv", traj)
    assert path.read_text().splitlines()[0] == "t,x,y"
    rows = io.read_trajectory(path)
    assert np.array_equal(np.array(rows), np.column_stack([traj.t, traj.x, traj.y]))


def test_trace_round_trip(tmp_path):
    tr = run(A1(C=2.0, D=30.0, beta=0.8), ArrivalProcess.poisson(0.3),
             RunConfig(horizon=2000, N0=40, S0=30.0, stride=3))
    rows = io.read_trace(io.write_trace(tmp_path / "tr.csv", tr))
    r = tr.records
    assert rows == list(zip(r["n"].tolist(), r["N"].tolist(), r["S"].tolist(), r["p"].tolist(),
                            r["B"].tolist(), r["J"].tolist()))
    rows = io.read_summaries(io.write_summaries(tmp_path / "s.csv", [tr]))
    assert rows[0][1:4] == (2000, tr.summary.successes, tr.summary.arrivals)


def test_sweep_round_trip(tmp_path):
    spec = A1(C=2.0, D=30.0, beta=0.8)
    res = sweep({"lam": [0.1, 0.3], "beta": [0.8, 2.0]}, spec, ArrivalProcess.poisson(0.3),
                RunConfig(horizon=2000, replications=3))
    path = io.write_sweep(tmp_path / "sw.csv", res)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["lam", "beta", "verdict", "slope", "slope_ci_lo", "slope_ci_hi",
                      "recurrences", "mean_return", "throughput", "error"]
    back = io.read_sweep(path)
    rows = res.rows()
    assert len(back) == 4
    for got, want in zip(back, rows):
        for k, v in want.items():
            if isinstance(v, float) and math.isnan(v):
                assert math.isnan(got[k])
            else:
                assert got[k] == v


@pytest.mark.parametrize("text", [
    "t,x\n0,1\n",               # wrong header
    "t,x,y\n0,1\n",             # short row
    "t,x,y\n0,1,abc\n",         # not a number
    "",                         # empty file
])
def test_reader_rejects_bad_files(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(io.SchemaError):
        io.read_trajectory(p)


def test_json_has_schema_version_and_handles_numpy(tmp_path):
    p = io.write_json(tmp_path / "r.json", {"a": np.float64(1.5), "b": np.arange(3),
                                             "c": math.nan, "d": (1, 2)})
    d = json.loads(p.read_text())
    assert d == {"schema_version": 1, "a": 1.5, "b": [0, 1, 2], "c": None, "d": [1, 2]}


# -- config -----------------------------------------------------------------

def test_defaults_validate():
    cfg = validate(default_config())
    assert cfg.needs_derivation()
    spec = cfg.protocol()
    assert isinstance(spec, A1) and spec.beta == pytest.approx(0.71)
    assert cfg.run_config().horizon == 2_000_000


def test_partial_config_merges(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"run": {"horizon": 10}, "sweep": {"axes": {"D": [1.0]}}}))
    cfg = load_config(p)
    assert cfg.run_config().horizon == 10 and cfg.run_config().replications == 10
    assert cfg.raw["sweep"]["axes"] == {"D": [1.0]}


def test_explicit_protocol(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"protocol": {"class": "A2", "C": 2.0, "beta": 0.9,
                                          "h": {"name": "sqrt"}}}))
    cfg = load_config(p)
    assert cfg.protocol() == A2(C=2.0, beta=0.9, h=HFunction("sqrt"))
    assert not cfg.needs_derivation()


@pytest.mark.parametrize("doc,line,fragment", [
    ('{\n  "run": {\n    "horizon": -5\n  }\n}\n', 3, "horizon"),
    ('{\n  "analysis": {\n    "lam0": 0.3,\n    "lam1": 0.2\n  }\n}\n', 3, "lam0 < lam1"),
    ('{\n  "analysis": {\n    "lam1": 0.4\n  }\n}\n', 3, "capacity"),
    ('{\n  "protocol": {"class": "A2"}\n}\n', 2, "needs"),
    ('{\n  "bogus": 1\n}\n', None, "bogus"),
    ('{\n  "run": {\n    "horizon": 5,\n  }\n}\n', 4, "invalid JSON"),
])
def test_config_errors_point_at_lines(tmp_path, doc, line, fragment):
    p = tmp_path / "c.json"
    p.write_text(doc)
    with pytest.raises(ConfigError) as err:
        load_config(p)
    msg = str(err.value)
    assert fragment in msg
    if line is not None:
        assert f"c.json:{line}:" in msg


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


# -- cli --------------------------------------------------------------------

def _write(tmp_path, doc, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_cli_derive_params(tmp_path, capsys):
    assert main(["derive-params", "--l0", "0.25", "--l1", "0.35", "--out", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["schema_version"] == 1
    assert out["C1"] == pytest.approx(2.135668554273591, rel=1e-15)
    assert set(out["chosen"]) == {"C", "beta", "D"}
    assert (tmp_path / "derived_params.json").exists()


@pytest.mark.parametrize("argv", [["--l0", "0.4", "--l1", "0.3"], ["--l1", "0.37"]])
def test_cli_derive_params_rejects_band(tmp_path, argv, capsys):
    assert main(["derive-params", "--out", str(tmp_path)] + argv) == 2
    assert "error" in capsys.readouterr().err


def test_cli_usage_errors(capsys):
    assert main([]) == 2
    assert main(["nonsense"]) == 2
    assert main(["simulate", "--seed", "-3"]) == 2
    assert main(["simulate", "--jobs", "0"]) == 2


def test_cli_verify_lemma(tmp_path, capsys):
    assert main(["verify-lemma", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "lemma_report.json").read_text())
    assert report["passed"] and len(report["reports"]) == 21
    bad = _write(tmp_path, {"protocol": {"class": "A1", "C": 2.2, "beta": 0.71, "D": 1.0}})
    assert main(["verify-lemma", "--config", bad, "--out", str(tmp_path / "b")]) == 1
    assert "b_two_roots" in capsys.readouterr().out
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["verify-lemma", "--config", str(broken)]) == 2


def test_cli_fluid(tmp_path, capsys):
    assert main(["fluid", "--out", str(tmp_path / "ok")]) == 0
    files = sorted((tmp_path / "ok" / "fluid").glob("*.csv"))
    assert len(files) == 20
    for f in files:
        io.read_trajectory(f)
    io.read_drift_field(tmp_path / "ok" / "drift_field.csv")
    assert main(["fluid", "--lam", "0.45", "--out", str(tmp_path / "bad")]) == 1
    empty = _write(tmp_path, {"fluid": {"field_x": [0.0, 1.0, 0]}})
    assert main(["fluid", "--config", empty, "--out", str(tmp_path / "e")]) == 2
    assert main(["drift-field", "--config", empty, "--out", str(tmp_path / "e")]) == 2


def test_cli_drift_field(tmp_path):
    assert main(["drift-field", "--out", str(tmp_path)]) == 0
    rows = io.read_drift_field(tmp_path / "drift_field.csv")
    assert len(rows) == 21 * 20


def test_cli_simulate_deterministic(tmp_path, capsys):
    cfg = _write(tmp_path, {"run": SMALL_RUN | {"write_traces": True}})
    for name in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--seed", "7", "--out", str(tmp_path / name)]) == 0
    for f in ("verdict.csv", "verdict.json", "summaries.csv", "traces/trace_000.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = io.read_sweep(tmp_path / "a" / "verdict.csv")
    assert rows[0]["lam"] == 0.3 and rows[0]["verdict"] in ("stable", "transient", "inconclusive")
    assert main(["simulate", "--config", cfg, "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "summaries.csv").read_bytes() != (tmp_path / "c" / "summaries.csv").read_bytes()


def test_cli_simulate_supercritical(tmp_path, capsys):
    cfg = _write(tmp_path, {"arrivals": {"kind": "poisson", "rate": 0.45},
                            "run": SMALL_RUN | {"N0": 0, "S0": 1.0, "horizon": 100_000}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert io.read_sweep(tmp_path / "verdict.csv")[0]["verdict"] == "transient"


def test_cli_lam_flag_sets_arrival_rate(tmp_path, capsys):
    cfg = _write(tmp_path, {"run": SMALL_RUN | {"horizon": 1000}})
    assert main(["simulate", "--config", cfg, "--lam", "0.2", "--out", str(tmp_path)]) == 0
    assert io.read_sweep(tmp_path / "verdict.csv")[0]["lam"] == 0.2
    assert json.loads((tmp_path / "verdict.json").read_text())["arrivals"]["rate"] == 0.2


def test_cli_sweep_jobs_identical(tmp_path, capsys):
    cfg = _write(tmp_path, {"run": SMALL_RUN, "sweep": {"axes": {"lam": [0.2, 0.45]}}})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "j1")]) == 0
    assert main(["sweep", "--config", cfg, "--jobs", "2", "--out", str(tmp_path / "j2")]) == 0
    for f in ("sweep.csv", "sweep.json"):
        assert (tmp_path / "j1" / f).read_bytes() == (tmp_path / "j2" / f).read_bytes()
    assert len(io.read_sweep(tmp_path / "j1" / "sweep.csv")) == 2
    empty = _write(tmp_path, {"sweep": {"axes": {}}}, "e.json")
    assert main(["sweep", "--config", empty, "--out", str(tmp_path / "e")]) == 2


def test_cli_explore(tmp_path, capsys):
    cfg = _write(tmp_path, {"run": SMALL_RUN, "explore": {"lambdas": [0.35]}})
    assert main(["explore", "--config", cfg, "--out", str(tmp_path / "ok")]) == 0
    report = json.loads((tmp_path / "ok" / "explore.json").read_text())
    entry = report["results"][0]
    assert "evidence" in entry["label"] and entry["validators"]["eps"]["passed"]
    io.read_sweep(tmp_path / "ok" / "explore_00.csv")
    bad = _write(tmp_path, {"run": SMALL_RUN, "explore": {
        "family": "A2", "selections": [{"h": {"name": "linear", "param": 2.0}}]}}, "bad.json")
    assert main(["explore", "--config", bad, "--out", str(tmp_path / "bad")]) == 2
    assert not (tmp_path / "bad" / "explore_00.csv").exists()


def test_cli_print_default_config(capsys):
    assert main(["print-default-config"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc == default_config()
    validate(doc)
