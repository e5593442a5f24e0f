import json

import numpy as np
import pytest

from retrialq import config as C
from retrialq.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_validate_preset(capsys):
    code, out, _ = run(capsys, "validate", "--preset", "baseline")
    body = json.loads(out)
    assert code == 0 and body["ok"] and body["violations"] == []


def test_validate_reports_violations(capsys, tmp_path):
    raw = C.preset_dict("baseline")
    raw["service_h"]["beta"] = [0.4, 0.4]
    path = tmp_path / "bad.yaml"
    path.write_text(json.dumps(raw))
    code, out, _ = run(capsys, "validate", "--config", str(path))
    assert code == 2
    assert any("service_h" in v for v in json.loads(out)["violations"])


def test_unknown_preset_and_missing_source(capsys):
    assert run(capsys, "solve", "--preset", "nope")[0] == 2
    assert run(capsys, "measures")[0] == 2


def test_non_convergence_exit_code(capsys):
    code, _, err = run(capsys, "solve", "--preset", "baseline", "--m-cap", "3")
    assert code == 3 and "M_cap=3" in err


def test_dimension_cap_exit_code(capsys):
    code, _, err = run(capsys, "solve", "--preset", "baseline", "--set", "S=12", "--set", "M=2")
    assert code == 4


def test_measures_csv_header_and_json(capsys):
    code, out, _ = run(capsys, "measures", "--preset", "baseline", "--set", "M=4")
    cfg = C.load_config(preset="baseline", overrides=["M=4"])
    lines = out.splitlines()
    assert code == 0
    assert lines[0] == f"# config-hash: {C.config_hash(cfg)}"
    assert lines[1] == "measure,value"
    code, out, _ = run(capsys, "measures", "--preset", "baseline", "--set", "M=4",
                       "--format", "json")
    body = json.loads(out)
    assert body["config_hash"] == C.config_hash(cfg) and body["M"] == 4


def test_solve_outputs_roundtrip(capsys, tmp_path):
    code, out, _ = run(capsys, "solve", "--preset", "table-ln0.2", "--set", "M=5",
                       "--out", str(tmp_path))
    assert code == 0
    written = (tmp_path / "config.yaml").read_text()
    h = written.splitlines()[0].split()[-1]
    back = C.load_config(tmp_path / "config.yaml")
    assert C.config_hash(back) == h
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config_hash"] == h and summary["M"] == 5
    z = np.load(tmp_path / "steady_state.npz")
    assert str(z["config_hash"]) == h
    assert sum(z[f"z{l}"].sum() for l in range(6)) == pytest.approx(1, abs=1e-12)


def test_sweep_long_and_wide_are_deterministic(capsys, tmp_path):
    args = ["sweep", "--preset", "baseline", "--set", "M=4", "--axis", "lambda_h",
            "--grid", "0.2:0.6:0.2", "--measure", "P_d,P_preempt", "--s", "2,3"]
    _, long1, _ = run(capsys, *args)
    _, long2, _ = run(capsys, *args)
    assert long1 == long2
    lines = long1.splitlines()
    assert lines[1] == "S,axis,value,measure,estimate"
    assert len(lines) == 2 + 2 * 3 * 2
    _, wide, _ = run(capsys, *args, "--wide")
    assert wide.splitlines()[1] == "S,lambda_h,P_d,P_preempt"
    code, _, _ = run(capsys, *args[:-6], "--grid", "1:0:1")
    assert code == 2


def test_sweep_rejects_unknown_measure(capsys):
    code, _, err = run(capsys, "sweep", "--preset", "baseline", "--set", "M=3", "--axis", "theta",
                       "--grid", "1,2", "--measure", "P_zz")
    assert code == 2 and "P_zz" in err


def test_simulate_is_byte_identical(capsys, tmp_path):
    args = ["simulate", "--preset", "baseline", "--events", "20000", "--seed", "9",
            "--orbit-m", "6"]
    run(capsys, *args, "--out", str(tmp_path / "a"))
    run(capsys, *args, "--out", str(tmp_path / "b"))
    a = (tmp_path / "a" / "simulate.csv").read_bytes()
    assert a == (tmp_path / "b" / "simulate.csv").read_bytes()
    assert a.decode().splitlines()[1] == "param,measure,estimate,stderr,events,seed"


def test_optimize_vacuous_and_infeasible(capsys):
    base = ["optimize", "--preset", "table-ln0.1", "--set", "M=4", "--s-max", "3",
            "--grid-step", "0.5"]
    code, out, _ = run(capsys, *base, "--eps1", "1", "--eps2", "1", "--wide")
    rows = out.splitlines()
    assert code == 0 and rows[1] == "mu_h,S,lambda_h,P_d,P_preempt,iterations"
    assert rows[2].split(",")[1] == "2"
    code, out, err = run(capsys, *base, "--eps1", "1e-9", "--eps2", "1e-9")
    assert code == 5 and "no feasible" in err


def test_unwritable_output(capsys, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, _ = run(capsys, "measures", "--preset", "baseline", "--set", "M=3",
                     "--out", str(blocker / "sub"))
    assert code == 2
