import csv
import json
import subprocess
import sys

import pytest

from adlight.cli import main
from adlight.harness import EVAL_FIELDS


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


def test_catalog_lists_and_writes(capsys, tmp_path):
    code, out, _ = run(capsys, "catalog", "--write", str(tmp_path))
    assert code == 0
    for sid in ("INT1-1", "INT4", "INT6"):
        assert sid in out
        assert (tmp_path / f"{sid}.json").exists()
    assert len(list(tmp_path.glob("*.json"))) == 11


def test_simulate_accepts_scenario_files(capsys, tmp_path):
    run(capsys, "catalog", "--write", str(tmp_path))
    code, out, _ = run(capsys, "simulate", "--scenario", str(tmp_path / "INT5.json"), "--plan", "fixed:20",
                       "--duration", "300", "--trace", str(tmp_path / "trace.csv"))
    assert code == 0
    (m,) = json_lines(out)
    assert m["scenario"] == "INT5" and m["avg_waiting_s"] >= 0
    assert len((tmp_path / "trace.csv").read_text().splitlines()) > 300


def test_unknown_scenario_is_a_machine_readable_error(capsys):
    code, _, err = run(capsys, "simulate", "--scenario", "INT9")
    assert code == 2
    line = err.strip().splitlines()[-1]
    assert line.startswith("ERROR ")
    payload = json.loads(line[len("ERROR "):])
    assert payload["error"] == "CliError" and payload["command"] == "simulate"


def test_bad_plan_and_missing_checkpoint(capsys, tmp_path):
    assert run(capsys, "simulate", "--scenario", "INT1-1", "--plan", "magic")[0] == 2
    code, _, err = run(capsys, "evaluate", "--checkpoint", str(tmp_path / "none.adl"), "--out-dir", str(tmp_path))
    assert code != 0 and "ERROR" in err


def test_train_evaluate_retrain_report(capsys, tmp_path):
    d = str(tmp_path)
    code, out, _ = run(capsys, "train", "--scenarios", "INT2-1", "INT3-1", "--steps", "256", "--n-envs", "2",
                       "--episode-s", "300", "--run", "uni", "--out-dir", d, "--seed", "3")
    assert code == 0
    ckpt = json_lines(out)[0]["checkpoint"]
    assert (tmp_path / "curve_uni.csv").exists()

    code, out, _ = run(capsys, "evaluate", "--checkpoint", ckpt, "--scenarios", "INT5", "INT1-1",
                       "--episodes", "1", "--duration", "300", "--out-dir", d)
    assert code == 0
    with open(tmp_path / "eval.csv") as f:
        reader = csv.DictReader(f)
        assert reader.fieldnames == list(EVAL_FIELDS)
        rows = list(reader)
    assert {r["scenario"] for r in rows} == {"INT5", "INT1-1"}
    assert {r["controller"] for r in rows} == {"adlight"}

    code, out, _ = run(capsys, "retrain", "--checkpoint", ckpt, "--scenario", "INT5", "--steps", "128",
                       "--n-envs", "2", "--episode-s", "300", "--run", "re", "--out-dir", d)
    assert code == 0 and (tmp_path / "re.adl").exists() and (tmp_path / "curve_re.csv").exists()


def test_baseline_and_report_degradation(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    common = ["--scenario", "INT2-1", "--episodes", "1", "--duration", "600"]
    assert run(capsys, "baseline", "--method", "webster", *common, "--out-dir", str(a))[0] == 0
    assert run(capsys, "baseline", "--method", "fixed", "--green", "40", *common, "--out-dir", str(b))[0] == 0
    merged = tmp_path / "eval.csv"
    lines = (a / "eval.csv").read_text().splitlines() + (b / "eval.csv").read_text().splitlines()[1:]
    merged.write_text("\n".join(lines) + "\n")
    code, out, _ = run(capsys, "report", "--eval", str(merged), "--model", "fixed40", "--reference", "webster",
                       "--out-dir", str(tmp_path))
    assert code == 0
    (m,) = json_lines(out)
    assert set(m["per_scenario"]) == {"INT2-1"}
    assert (tmp_path / "degradation.csv").exists()
    assert run(capsys, "report", "--eval", str(merged), "--model", "nope", "--reference", "webster")[0] == 2
    assert run(capsys, "report")[0] == 2


def test_baseline_rl_variant(capsys, tmp_path):
    code, out, _ = run(capsys, "baseline", "--method", "next-or-not", "--scenario", "INT1-1", "--steps", "128",
                       "--n-envs", "2", "--episodes", "1", "--duration", "300", "--out-dir", str(tmp_path))
    assert code == 0
    assert (tmp_path / "next-or-not_INT1-1.adl").exists()
    assert json_lines(out)[0]["controller"] == "next-or-not"


def test_report_runs_a_suite(capsys, tmp_path):
    cfg = {"controllers": ["webster", "adlight"], "train_scenarios": ["INT2-1"], "test_scenarios": ["INT5"],
           "train_steps": 128, "reference_steps": 64, "retrain_fraction": 0.5, "curve_points": 2,
           "episodes": 1, "eval_seeds": [0], "episode_s": 300}
    path = tmp_path / "suite.json"
    path.write_text(json.dumps(cfg))
    code, _, _ = run(capsys, "report", "--config", str(path), "--out-dir", str(tmp_path / "out"))
    assert code == 0
    for name in ("eval.csv", "degradation.csv", "curve_adlight.csv"):
        assert (tmp_path / "out" / name).exists()


def test_console_entry_point_runs():
    r = subprocess.run([sys.executable, "-m", "adlight", "catalog"], capture_output=True, text=True)
    assert r.returncode == 0 and "INT6" in r.stdout
    r = subprocess.run([sys.executable, "-m", "adlight", "simulate"], capture_output=True, text=True)
    assert r.returncode == 2  # argparse usage error
