import json

import pytest

from selfheal import cli
from selfheal.cli import EXIT_CONFIG, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, main
from selfheal.config import load_config
from selfheal.domain import Plan
from selfheal.planner import brute_force_solve, reward
from selfheal.traces import read_trace


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _json_run(capsys, *argv):
    code, out, _ = _run(capsys, *argv)
    return code, json.loads(out)


@pytest.fixture
def case1(tmp_path):
    path = tmp_path / "case1.json"
    path.write_text(json.dumps({"nodes": 16, "tasks": {"case": 1}}))
    return path


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({
        "nodes": {"count": 3, "workers_per_node": 4},
        "tasks": [{"id": "a", "model_size": 1.3e9, "weight": 1.5},
                  {"id": "b", "model_size": 1.3e9},
                  {"id": "c", "model_size": 1.3e9, "weight": 0.7}],
        "cost_params": {"horizon": 86400},
    }))
    return path


def test_plan_identical_tasks_share_one_optimum(capsys, case1):
    code, rep = _json_run(capsys, "plan", "--config", str(case1), "--seed", "3")
    assert code == EXIT_OK and rep["seed"] == 3 and len(rep["config_sha256"]) == 64
    rows = rep["plan"]["tasks"]
    xs = [r["x"] for r in rows]
    assert sum(xs) <= 128 and xs == sorted(xs)
    # equal counts get equal layouts
    by_x = {}
    for r in rows:
        assert by_x.setdefault(r["x"], (r["dp"], r["pp"], r["tp"])) == (r["dp"], r["pp"], r["tp"])

    # oracle: best split of 128 workers into six parts over the shared table
    cfg = load_config(case1)
    t = cfg.tasks[0]
    g = {k: round(reward(t, 0, k, 128, False, cfg.cost)) for k in [0] + t.calibration.points()}
    best = {0: 0}
    for _ in range(6):
        nxt = {}
        for used, v in best.items():
            for k, gk in g.items():
                if used + k <= 128 and v + gk > nxt.get(used + k, -1):
                    nxt[used + k] = v + gk
        best = nxt
    assert rep["plan"]["objective"] == max(best.values())


def test_plan_fault_changes_only_what_pays(capsys, case1):
    _, base = _json_run(capsys, "plan", "--config", str(case1))
    code, hit = _json_run(capsys, "plan", "--config", str(case1), "--fault", "node:n03")
    assert code == EXIT_OK and hit["capacity"] == 120 and hit["faulted"]
    before = {r["id"]: r["x"] for r in base["plan"]["tasks"]}
    after = {r["id"]: r["x"] for r in hit["plan"]["tasks"]}
    assert sum(after.values()) <= 120
    moved = {k for k in after if after[k] != before[k]}
    assert 0 < len(moved) < len(after)


def test_plan_join_and_finish(capsys, case1):
    _, joined = _json_run(capsys, "plan", "--config", str(case1), "--join", "2")
    assert joined["capacity"] == 144
    _, done = _json_run(capsys, "plan", "--config", str(case1), "--finish", "task:t6")
    assert [r["id"] for r in done["plan"]["tasks"]] == ["t1", "t2", "t3", "t4", "t5"]


def test_plan_oracle_small_instance(capsys, small):
    code, rep = _json_run(capsys, "plan", "--config", str(small), "--oracle", "--lookup")
    assert code == EXIT_OK and rep["oracle"] == "agree" and rep["capacity"] == 12
    assert "fault:n00" in rep["lookup"] and "join:None" in rep["lookup"]


def test_plan_oracle_mismatch_exit_code(capsys, small, monkeypatch):
    def off_by_one(inputs):
        plan = brute_force_solve(inputs)
        return Plan(plan.tasks, plan.objective - 1)

    monkeypatch.setattr(cli, "brute_force_solve", off_by_one)
    code, rep = _json_run(capsys, "plan", "--config", str(small), "--oracle")
    assert code == EXIT_MISMATCH and "mismatch" in rep["oracle"]


@pytest.mark.parametrize("argv", [
    ["--fault", "n03"],
    ["--fault", "node:zz"],
    ["--join", "node:n01"],
    ["--finish", "task:zz"],
])
def test_plan_usage_errors(capsys, case1, argv):
    code, _, err = _run(capsys, "plan", "--config", str(case1), *argv)
    assert code == EXIT_USAGE and "error" in err


def test_invalid_config_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": 1, "tasks": [{"id": "a"}]}))
    code, _, err = _run(capsys, "plan", "--config", str(bad))
    assert code == EXIT_CONFIG and "tasks[0].model_size" in err
    code, _, _ = _run(capsys, "plan", "--config", str(tmp_path / "missing.json"))
    assert code == EXIT_CONFIG


@pytest.mark.parametrize("name, horizon", [("trace-a", 8 * 7 * 86400.0), ("trace-b", 7 * 86400.0)])
def test_trace_gen_presets(capsys, tmp_path, name, horizon):
    out = tmp_path / "t.jsonl"
    code, summary = _json_run(capsys, "trace-gen", "--preset", name, "--seed", "7", "--out", str(out))
    assert code == EXIT_OK and summary["horizon"] == horizon and summary["seed"] == 7
    tr = read_trace(out)
    assert tr.horizon == horizon and tr.meta == {"preset": name}
    assert summary["sev1"] == tr.counts()["sev1_node_fault"]


def test_trace_gen_zero_rate(capsys, tmp_path):
    out = tmp_path / "empty.jsonl"
    code, summary = _json_run(capsys, "trace-gen", "--lambda", "0", "--horizon", "3600", "--out", str(out))
    assert code == EXIT_OK and summary["sev1"] == summary["sev2"] == summary["sev3"] == 0
    assert json.loads(out.read_text()) == {"horizon": 3600.0, "seed": 0}


def test_trace_gen_seed_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("UNICRON_SEED", "12")
    _, summary = _json_run(capsys, "trace-gen", "--preset", "trace-b", "--out", str(tmp_path / "t.jsonl"))
    assert summary["seed"] == 12


@pytest.mark.parametrize("argv", [
    ["--preset", "trace-a", "--lambda", "1e-6"],
    [],
    ["--lambda", "1e-6", "--mix", "0.5,0.5"],
    ["--lambda", "1e-6", "--mix", "0.9,0.9,0.9"],
])
def test_trace_gen_usage_errors(capsys, tmp_path, argv):
    code, _, _ = _run(capsys, "trace-gen", *argv, "--out", str(tmp_path / "t.jsonl"))
    assert code == EXIT_USAGE


def test_simulate_empty_trace(capsys, tmp_path, small):
    trace = tmp_path / "empty.jsonl"
    _run(capsys, "trace-gen", "--lambda", "0", "--horizon", "3600", "--out", str(trace))
    out, summ, log = tmp_path / "m.csv", tmp_path / "s.json", tmp_path / "log.jsonl"
    code, rep = _json_run(capsys, "simulate", "--config", str(small), "--trace", str(trace), "--policy", "unicron",
                          "--out", str(out), "--summary", str(summ), "--log", str(log))
    assert code == EXIT_OK and json.loads(summ.read_text()) == rep
    _, plan = _json_run(capsys, "plan", "--config", str(small))
    cfg = load_config(small)
    rate = sum(t.weight * t.calibration.entries[r["x"]].flops
               for t, r in zip(cfg.tasks, plan["plan"]["tasks"]) if r["x"])
    assert rep["accumulated_waf"] == pytest.approx(3600 * rate, rel=1e-12)
    assert rep["config_sha256"] == cfg.digest
    lines = out.read_text().splitlines()
    assert lines[0] == "time_s,task_id,waf,cluster_waf,accumulated_waf"
    assert len(lines) == 1 + 3 * 61  # ticks at 0, 60, ..., 3600 for three tasks


def test_simulate_unicron_beats_restart(capsys, tmp_path):
    cfg = tmp_path / "c5.json"
    cfg.write_text(json.dumps({"nodes": 16, "tasks": {"case": 5}}))
    trace = tmp_path / "a.jsonl"
    _run(capsys, "trace-gen", "--preset", "trace-a", "--seed", "1", "--out", str(trace))
    res = {}
    for policy in ("unicron", "restart_checkpoint"):
        _, rep = _json_run(capsys, "simulate", "--config", str(cfg), "--trace", str(trace), "--policy", policy,
                           "--out", str(tmp_path / f"{policy}.csv"), "--sample-every", "0")
        res[policy] = rep["accumulated_waf"]
    assert res["unicron"] > res["restart_checkpoint"]


def test_simulate_missing_trace(capsys, tmp_path, small):
    code, _, _ = _run(capsys, "simulate", "--config", str(small), "--trace", str(tmp_path / "nope.jsonl"),
                      "--policy", "unicron", "--out", str(tmp_path / "m.csv"))
    assert code == EXIT_CONFIG


def test_simulate_rejects_unknown_policy(capsys, small, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--config", str(small), "--trace", "x", "--policy", "best", "--out", "y"])
    assert exc.value.code == EXIT_USAGE


def test_compare_report(capsys, tmp_path):
    cfg = tmp_path / "c5.json"
    cfg.write_text(json.dumps({"nodes": 16, "tasks": {"case": 5}}))
    out = tmp_path / "cmp.json"
    code, _, _ = _run(capsys, "compare", "--config", str(cfg), "--preset", "trace-b", "--seeds", "2",
                      "--policies", "unicron", "restart_checkpoint", "--jobs", "2", "--out", str(out))
    rep = json.loads(out.read_text())
    assert code == EXIT_OK and rep["traces"] == 2
    assert rep["ratio_to_unicron"]["unicron"] == 1.0 and rep["unicron_over"]["restart_checkpoint"] > 1.0
    code, _, _ = _run(capsys, "compare", "--config", str(cfg))
    assert code == EXIT_USAGE


@pytest.mark.parametrize("argv", [
    ["--dp", "4", "--pp", "2", "--microbatches", "12", "--fail-rank", "2", "--fail-after-mb", "1"],
    ["--dp", "4", "--pp", "2", "--microbatches", "12", "--fail-rank", "1", "--fail-after-reduced-segments", "1"],
    ["--dp", "3", "--pp", "4", "--microbatches", "6", "--fail-after-reduced-segments", "2", "--fail-stage", "0"],
])
def test_verify_transition_equal(capsys, argv):
    code, rep = _json_run(capsys, "verify-transition", *argv)
    assert code == EXIT_OK and rep["verdict"] == "EQUAL" and rep["reference"] == rep["resumed"]


def test_verify_transition_single_rank_falls_back(capsys):
    code, rep = _json_run(capsys, "verify-transition", "--dp", "1", "--fail-after-mb", "0")
    assert code == EXIT_OK and rep["verdict"] == "CHECKPOINT_FALLBACK"


def test_verify_transition_sweep(capsys):
    code, rep = _json_run(capsys, "verify-transition", "--sweep", "--dims", "8")
    assert code == EXIT_OK and rep["verdict"] == "EQUAL" and rep["mismatches"] == 0 and rep["points"] > 1000


@pytest.mark.parametrize("argv", [
    ["--dp", "3", "--microbatches", "4"],
    ["--dp", "2", "--fail-rank", "2"],
    ["--dp", "2", "--pp", "2", "--fail-after-reduced-segments", "3"],
])
def test_verify_transition_usage_errors(capsys, argv):
    assert _run(capsys, "verify-transition", *argv)[0] == EXIT_USAGE


def test_calibrate_round_trip(capsys, tmp_path, small):
    out = tmp_path / "cal.csv"
    code, summary = _json_run(capsys, "calibrate", "--config", str(small), "--out", str(out))
    assert code == EXIT_OK and set(summary) == {"a", "b", "c"}
    code, again = _json_run(capsys, "calibrate", "--csv", str(out))
    assert code == EXIT_OK and again == summary


def test_calibrate_bad_csv(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("task_id,x,flops,dp,pp,tp\na,2,1.0,1,1,1\n")
    code, _, err = _run(capsys, "calibrate", "--csv", str(bad))
    assert code == EXIT_CONFIG and "line 2" in err
