from __future__ import annotations

import csv
import json
import math
import shutil
import subprocess
import sys

import pytest

from llmsched.cli import main
from llmsched.cost_model import load_profile
from llmsched.event_sim import derive_latency_bounds
from llmsched.schedule_core import load_schedule

from conftest import CLUSTER4, OPT, table_for, task


@pytest.fixture(scope="module")
def profile(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "a40.json"
    assert main(["synth-profile", "--params", "a40", "--out", str(path)]) == 0
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("synth-profile", "simulate", "event-sim", "optimize", "audit", "compare"):
        assert cmd in out


@pytest.mark.skipif(shutil.which("llmsched") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["llmsched", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "llmsched" in res.stdout


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "llmsched.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0


def test_synth_profile_round_trip(profile):
    tab = load_profile(profile)
    ref = table_for("a40")
    assert tab.tp_degrees == ref.tp_degrees
    assert (tab.batch_grid == ref.batch_grid).all()


def test_missing_profile_exit_1(capsys, tmp_path):
    missing = tmp_path / "nope.json"
    code, _, err = run(capsys, "optimize", "--profile", missing, "--task", "T", "--bound", "inf")
    assert code == 1
    assert str(missing) in err


def test_missing_workload_exit_1(capsys, profile):
    code, _, err = run(capsys, "optimize", "--profile", profile, "--bound", "inf")
    assert code == 1 and "--task" in err


def test_bad_distribution_file_exit_1(capsys, profile, tmp_path):
    bad = tmp_path / "d.json"
    bad.write_text("{not json")
    code, _, err = run(capsys, "optimize", "--profile", profile, "--task", "T", "--input-dist", bad, "--bound", "9")
    assert code == 1 and err.startswith("error:")


def test_infeasible_bound_exit_2(capsys, profile):
    code, _, err = run(capsys, "optimize", "--profile", profile, "--task", "T", "--bound", "0.01")
    assert code == 2
    last = json.loads(err.strip().splitlines()[-1])
    assert last["lower_corner"]["latency"] > 0.01


def test_optimize_then_simulate(capsys, profile, tmp_path):
    sched = tmp_path / "s.json"
    code, out, _ = run(capsys, "optimize", "--profile", profile, "--task", "T", "--bound", "inf",
                       "--strategies", "RRA", "--schedule-out", sched)
    assert code == 0
    opt = json.loads(out)
    assert opt["manifest"]["command"] == "optimize"
    cfg = load_schedule(sched)[0]
    assert cfg.strategy == "RRA"
    code, out, _ = run(capsys, "simulate", "--schedule", sched, "--profile", profile, "--task", "T")
    assert code == 0
    sim = json.loads(out)
    assert profile in sim["manifest"]["inputs"] and str(sched) in sim["manifest"]["inputs"]
    assert sim["estimate"]["throughput"] == pytest.approx(opt["best"]["throughput"], rel=1e-9)


def test_event_sim_is_deterministic_and_csv_carries_manifest(capsys, profile, tmp_path):
    docs = []
    for k in range(2):
        path = tmp_path / f"q{k}.csv"
        code, out, _ = run(capsys, "event-sim", "--profile", profile, "--task", "S", "--baseline", "ft",
                           "--batch", 8, "--n-queries", 100, "--seed", 3, "--csv", path)
        assert code == 0
        docs.append((json.loads(out), path.read_text()))
    (a, ca), (b, cb) = docs
    assert a["stats"] == b["stats"]
    assert ca.splitlines()[1:] == cb.splitlines()[1:]
    first = ca.splitlines()[0]
    assert first.startswith("# manifest: ")
    assert json.loads(first[len("# manifest: "):])["seed"] == 3
    rows = list(csv.reader(ca.splitlines()[1:]))
    assert rows[0] == ["id", "input_len", "output_len", "admit", "finish"]
    assert len(rows) == 101


def test_audit_report_shape(capsys, profile):
    code, out, _ = run(capsys, "audit", "--profile", profile, "--task", "S", "--var", "b_e", "--stride", 4,
                       "--tolerances", "2,5,10")
    assert code == 0
    rows = json.loads(out)["nonmonotone"]
    assert [r["tolerance"] for r in rows] == [0.02, 0.05, 0.10]
    assert all(r["var"] == "b_e" for r in rows)


def test_audit_tp_needs_degree(capsys, profile):
    code, _, err = run(capsys, "audit", "--profile", profile, "--task", "S", "--var", "tp")
    assert code == 1 and "tp-degree" in err


def test_compare_bounds_are_deterministic(capsys, profile, tmp_path):
    out_csv = tmp_path / "c.csv"
    code, out, _ = run(capsys, "compare", "--profile", profile, "--task", "T", "--variants", "ft",
                       "--n-queries", 100, "--csv", out_csv)
    assert code == 0
    doc = json.loads(out)
    ref = derive_latency_bounds(OPT, CLUSTER4, table_for("a40"), task("T").pe, task("T").pd)
    assert doc["bounds"][:3] == ref[:3] and doc["bounds"][3] == "inf"
    lines = out_csv.read_text().splitlines()
    assert lines[0].startswith("# manifest: ") and lines[1] == "bound,ft"
    assert len(lines) == 2 + 4


def test_compare_exegpt_beats_ft_unbounded(capsys, profile):
    code, out, _ = run(capsys, "compare", "--profile", profile, "--task", "T", "--variants", "exegpt,ft",
                       "--bounds", "inf", "--n-queries", 600)
    assert code == 0
    row = json.loads(out)["throughput"]["inf"]
    assert row["exegpt"] >= row["ft"] > 0
    assert not math.isnan(row["exegpt"])


def test_unknown_variant_exit_1(capsys, profile):
    code, _, err = run(capsys, "compare", "--profile", profile, "--task", "T", "--variants", "orca")
    assert code == 1 and "orca" in err


def test_usage_error_is_input_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["optimize", "--bogus"])
    assert exc.value.code == 1
