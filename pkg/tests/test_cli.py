import json
import subprocess
import sys

import pytest

from adn_count.analysis import RunTrace
from adn_count.cli import main


def run_json(capsys, argv):
    code = main(argv)
    return code, json.loads(capsys.readouterr().out)


def test_run_mmc_example(capsys):
    code, out = run_json(capsys, [
        "run", "--protocol", "mmc", "--n", "5", "--ell", "2", "--epsilon", "0.5",
        "--adversary", "permuted_path", "--seed", "7", "--mode", "paper",
    ])
    assert code == 0
    assert out["counts"] == [5] * 5 and len(set(out["stop_rounds"])) == 1
    assert out["status"] == "done" and out["all_correct"]
    cfg = out["config"]
    assert (cfg["n"], cfg["ell"], cfg["seed"], cfg["adversary"], cfg["mode"]) == (5, 2, 7, "permuted_path", "paper")


def test_bound_example(capsys):
    code, out = run_json(capsys, ["bound", "--n", "8", "--ell", "1", "--epsilon", "0.5"])
    assert code == 0
    assert out["E"] == [2, 4, 8] and out["B"] == [6]
    assert sum(out["per_epoch_rounds"].values()) == out["total_bound"]


def test_trace_round_trip_and_verify(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    summary = tmp_path / "s.json"
    code = main([
        "run", "--n", "3", "--ell", "2", "--adversary", "random_tree", "--seed", "1",
        "--trace", str(trace), "--output", str(summary),
    ])
    assert code == 0
    meta = json.loads(summary.read_text())
    assert RunTrace.from_jsonl(trace).digest() == meta["trace_digest"]
    code, out = run_json(capsys, ["verify", "--trace", str(trace)])
    assert code == 0 and out["pass"]

    lines = trace.read_text().splitlines()
    rec = json.loads(lines[40])
    rec["phi"][0] = 7.0
    lines[40] = json.dumps(rec)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    code, out = run_json(capsys, ["verify", "--trace", str(bad)])
    assert code == 2 and not out["pass"]


def test_summary_reproduces_the_run(capsys, tmp_path):
    code, first = run_json(capsys, ["run", "--n", "4", "--ell", "3", "--adversary", "random_connected", "--seed", "11"])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(first["config"]))
    code2, second = run_json(capsys, ["run", "--config", str(cfg)])
    assert code == code2 == 0
    assert first == second


def test_config_errors(capsys, tmp_path):
    assert main(["run", "--protocol", "mmc", "--n", "3", "--ell", "3"]) == 1
    assert main(["run", "--protocol", "mmc", "--n", "1", "--ell", "1"]) == 1
    assert main(["run", "--protocol", "warp", "--n", "3"]) == 1
    assert main(["run", "--n", "3", "--ell", "1", "--mode", "fast"]) == 1
    assert main(["run", "--n", "3", "--ell", "1", "--adversary", "teleport"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["verify", "--trace", str(tmp_path / "missing.jsonl")]) == 1
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"n": 3, "ell": 1, "colour": "red"}))
    assert main(["run", "--config", str(bad)]) == 1
    assert "config error" in capsys.readouterr().err


def test_round_budget_exit_code(capsys):
    code, out = run_json(capsys, ["run", "--n", "5", "--ell", "1", "--round-budget", "500"])
    assert code == 3 and out["status"] == "budget_exhausted" and out["rounds"] == 500
    code, out = run_json(capsys, [
        "run", "--protocol", "llmc", "--n", "4", "--zeta", "0.5", "--mode", "scaled:0.2", "--round-budget", "100",
    ])
    assert code == 3 and out["budget_exhausted"]


def test_mmct_and_llmc_runs(capsys):
    code, out = run_json(capsys, ["run", "--protocol", "mmct", "--n", "4", "--K", "8", "--blacks", "2"])
    assert code == 0 and out["counts"] == [4] * 4 and out["flags"] == [True] * 4
    assert out["total_rounds"] == out["mmct"]["round_max"]
    code, out = run_json(capsys, [
        "run", "--protocol", "llmc", "--n", "4", "--zeta", "0.25", "--mode", "scaled:0.2",
        "--adversary", "random_tree", "--seed", "3",
    ])
    assert code == 0 and out["final_counts"] == [4] * 4
    assert out["iterations"][0]["K"] == 128 and out["iterations"][0]["threads"] == 300
    assert out["config"]["mode"] == {"scaled": [0.2, 0.2], "guarantee": "none"}


def test_fixtures(capsys, tmp_path):
    code, out = run_json(capsys, ["fixtures", "--out", str(tmp_path), "--lam", "2"])
    assert code == 0
    g1 = json.loads((tmp_path / "g_2_1.json").read_text())
    g2 = json.loads((tmp_path / "g_2_2.json").read_text())
    assert (g1["n"], g2["n"]) == (6, 12)
    assert g1["roles"].count("black") == 2 and g2["roles"].count("black") == 4
    assert out["g_2_2"]["edges"] == 20


def test_log_level_from_environment(tmp_path):
    env = {"ADN_COUNT_LOG": "LOUD", "PATH": ""}
    proc = subprocess.run([sys.executable, "-m", "adn_count", "bound", "--n", "4", "--ell", "1"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 1 and "ADN_COUNT_LOG" in proc.stderr
    env["ADN_COUNT_LOG"] = "info"
    proc = subprocess.run([sys.executable, "-m", "adn_count", "run", "--protocol", "llmc", "--n", "3",
                           "--zeta", "0.5", "--mode", "scaled:0.2"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and "INFO adn_count.llmc" in proc.stderr
