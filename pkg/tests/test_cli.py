import csv
import io
import json

import pytest

from ehrelay.cli import (
    EXIT_BUDGET,
    EXIT_CONFIG,
    EXIT_INFEASIBLE,
    SWEEP_COLUMNS,
    main,
    parse_config,
)

REF = {
    "channel": {"battery_capacity": 1, "energy_cost": 1},
    "policy": [[0.5, 0, 0.5, 0], [0.25, 0.25, 0.25, 0.25]],
    "plan": {"n": 300, "B": 3, "epsilon": 0.02, "rate_fraction": 0.5},
    "optimizer": {"grid_resolution": 4, "refine_iters": 60, "restarts": 1},
    "trials": 2,
    "base_seed": 3,
}


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(doc if isinstance(doc, str) else json.dumps(doc, indent=2))
    return str(path)


def run(tmp_path, argv, doc=REF, fmt="json"):
    cfg = write(tmp_path, doc)
    out = tmp_path / f"out.{fmt}"
    code = main([argv[0], "--config", cfg, "--out", str(out), "--format", fmt, *argv[1:]])
    return code, (out.read_text() if out.exists() else None)


def test_analyze_reference(tmp_path):
    code, text = run(tmp_path, ["analyze"])
    assert code == 0
    out = json.loads(text)
    assert out["achievable"] == pytest.approx(2 / 3, abs=1e-11)
    assert out["steady_state_valid"] is True
    assert out["transition_matrix"] == [[0.5, 0.5], [0.25, 0.75]]


def test_analyze_missing_crossover_same_as_zero(tmp_path):
    _, a = run(tmp_path, ["analyze"])
    doc = json.loads(json.dumps(REF))
    doc["channel"]["crossover"] = 0.0
    _, b = run(tmp_path, ["analyze"], doc)
    assert a == b


def test_analyze_decomposable(tmp_path):
    doc = dict(REF, policy=[[1, 0, 0, 0], [1, 0, 0, 0]])
    code, text = run(tmp_path, ["analyze"], doc)
    out = json.loads(text)
    assert code == 0 and out["steady_state_valid"] is False and out["achievable"] == 0.0


def test_analyze_needs_policy(tmp_path):
    doc = {k: v for k, v in REF.items() if k != "policy"}
    assert run(tmp_path, ["analyze"], doc)[0] == EXIT_CONFIG


def test_optimize_byte_identical(tmp_path):
    code, a = run(tmp_path, ["optimize", "--seed", "5"])
    _, b = run(tmp_path, ["optimize", "--seed", "5"])
    assert code == 0 and a == b
    out = json.loads(a)
    assert out["achievable"] > 0.85
    rates = [s["best"] for s in out["stage_trace"]]
    assert rates == sorted(rates)


def test_optimize_useless_channel(tmp_path):
    doc = dict(REF, channel={"battery_capacity": 1, "energy_cost": 1, "crossover": 0.5})
    code, text = run(tmp_path, ["optimize"], doc)
    assert code == 0 and json.loads(text)["achievable"] == 0.0


def test_optimize_budget_exit_code(tmp_path):
    doc = dict(REF, optimizer={"grid_resolution": 30, "budget": 1000})
    assert run(tmp_path, ["optimize"], doc)[0] == EXIT_BUDGET


def test_simulate_trivial_and_deterministic(tmp_path):
    doc = dict(REF, policy=[[0, 0, 1, 0], [0.5, 0.5, 0, 0]], plan={"n": 200, "B": 2, "epsilon": 0.02, "rate_fraction": 0.5}, trials=1)
    code, text = run(tmp_path, ["simulate"], doc)
    out = json.loads(text)
    assert code == 0
    for name in ("relay", "receiver", "end_to_end"):
        assert out["stats"]["error_rates"][name]["count"] == 0
    assert run(tmp_path, ["simulate"], doc)[1] == text


def test_simulate_frequencies(tmp_path):
    doc = dict(REF, policy=[[0, 0, 1, 0], [0.45, 0.1, 0.45, 0]], plan={"n": 2000, "B": 3, "epsilon": 0.02, "rate_fraction": 0.5}, trials=3)
    code, text = run(tmp_path, ["simulate", "--threads", "2"], doc)
    out = json.loads(text)
    assert code == 0
    for f, p in zip(out["stats"]["state_frequencies"], out["steady_state"]):
        assert abs(f - p) < 2e-2
    assert out["stats"]["energy_violations"] == 0


def test_simulate_infeasible_plan(tmp_path):
    doc = dict(REF, plan={"n": 300, "B": 3, "epsilon": 0.5, "rate_fraction": 0.5})
    assert run(tmp_path, ["simulate"], doc)[0] == EXIT_INFEASIBLE


def test_sweep_noise_non_increasing(tmp_path):
    doc = {k: v for k, v in REF.items() if k != "policy"}
    doc = dict(doc, trials=0)
    code, text = run(tmp_path, ["sweep", "--parameter", "p", "--values", "0,0.1,0.25,0.5"], doc, fmt="csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(text)))
    assert tuple(rows[0]) == SWEEP_COLUMNS
    rates = [float(r["achievable"]) for r in rows]
    assert all(a >= b for a, b in zip(rates, rates[1:])) and rates[-1] == 0.0
    assert {r["mode"] for r in rows} == {"optimized"}


def test_sweep_rate_fraction_errors(tmp_path):
    doc = dict(
        REF,
        policy=[[0, 0, 1, 0], [0.45, 0.1, 0.45, 0]],
        plan={"n": 600, "B": 2, "epsilon": 0.02, "rate_fraction": 0.5},
        trials=40,
        sweep={"parameter": "rate_fraction", "values": [0.5, 0.8, 1.2]},
    )
    code, text = run(tmp_path, ["sweep"], doc)
    out = json.loads(text)
    assert code == 0 and out["mode"] == "fixed"
    errs = [r["end_to_end_error_rate"] for r in out["rows"]]
    assert errs[0] <= errs[1] <= errs[2] and errs[2] > 0.5
    assert out["rows"][2]["collision_rate"] > out["rows"][0]["collision_rate"]


def test_sweep_single_value_matches_analyze(tmp_path):
    _, a = run(tmp_path, ["analyze"])
    doc = dict(REF, trials=0)
    _, s = run(tmp_path, ["sweep", "--parameter", "n", "--values", "300"], doc)
    row = json.loads(s)["rows"][0]
    ref = json.loads(a)
    for key in ("achievable", "relay_bound", "receiver_bound"):
        assert row[key] == ref[key]


def test_sweep_unknown_parameter(tmp_path):
    doc = dict(REF, sweep={"parameter": "colour", "values": [1]})
    assert run(tmp_path, ["sweep"], doc)[0] == EXIT_CONFIG
    assert run(tmp_path, ["sweep", "--parameter", "colour", "--values", "1"])[0] == EXIT_CONFIG


def test_sweep_fixed_policy_over_capacity_rejected(tmp_path):
    assert run(tmp_path, ["sweep", "--parameter", "U", "--values", "1,2"])[0] == EXIT_CONFIG


def test_unknown_key_reports_line(tmp_path, capsys):
    text = '{\n  "channel": {"battery_capacity": 1, "energy_cost": 1},\n  "plan": {\n    "n": 10,\n    "colour": 2\n  }\n}\n'
    path = write(tmp_path, text)
    assert main(["analyze", "--config", path]) == EXIT_CONFIG
    assert f"{path}:5:" in capsys.readouterr().err


def test_bad_json_reports_line(tmp_path, capsys):
    path = write(tmp_path, '{\n  "channel": {\n    "battery_capacity": 1,,\n  }\n}\n')
    assert main(["analyze", "--config", path]) == EXIT_CONFIG
    assert f"{path}:3:" in capsys.readouterr().err


@pytest.mark.parametrize(
    "patch",
    [
        {"channel": {"battery_capacity": 1, "energy_cost": 2}},
        {"channel": {"battery_capacity": 1}},
        {"policy": [[0.5, 0.5, 0, 0], [0.25] * 4]},
        {"policy": [[0.5, 0, 0.5]]},
        {"plan": {"decoder": "psychic"}},
        {"trials": -1},
        {"output": {"format": "xml"}},
        {"optimizer": {"refine_shrink": 2.0}},
        {"extra": 1},
    ],
)
def test_invalid_configs(tmp_path, patch):
    assert run(tmp_path, ["analyze"], dict(REF, **patch))[0] == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["analyze", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_bad_arguments():
    assert main(["frobnicate"]) == EXIT_CONFIG


def test_config_round_trip():
    cfg = parse_config(json.dumps(REF))
    again = parse_config(json.dumps(cfg.to_dict()))
    assert again == cfg


def test_output_dir_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("EHRELAY_OUTPUT_DIR", str(tmp_path / "results"))
    cfg = write(tmp_path, REF)
    assert main(["analyze", "--config", cfg, "--out", "a.csv", "--format", "csv"]) == 0
    rows = list(csv.reader(open(tmp_path / "results" / "a.csv", newline="")))
    assert rows[0] == ["field", "value"]
    assert ["achievable", "0.666666666667"] in rows


def test_stdout_when_no_output(tmp_path, capsys):
    cfg = write(tmp_path, REF)
    assert main(["analyze", "--config", cfg]) == 0
    assert json.loads(capsys.readouterr().out)["command"] == "analyze"


def test_every_artifact_parses(tmp_path):
    for cmd in ("analyze", "simulate"):
        for fmt in ("json", "csv"):
            code, text = run(tmp_path, [cmd], fmt=fmt)
            assert code == 0
            if fmt == "json":
                json.loads(text)
            else:
                rows = list(csv.reader(io.StringIO(text)))
                assert all(len(r) == len(rows[0]) for r in rows)
