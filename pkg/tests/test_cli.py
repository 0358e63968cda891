import csv
import json
import os
import subprocess
import sys

import pytest

from pcbreloc import cli, io

CONFIG = "n_frames = 160\nn_losses = 2\ntrajectory = circle\n"


@pytest.fixture(scope="module")
def scen(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.txt").write_text(CONFIG)
    assert cli.main(["simulate", "--config", str(d / "cfg.txt"), "--seed", "4", "--out", str(d / "scen")]) == 0
    return d


def read_json(p):
    return json.loads(p.read_text())


def test_simulate_writes_three_files(scen):
    names = sorted(p.name for p in (scen / "scen").iterdir())
    assert names == ["detections.jsonl", "groundtruth.txt", "scenario.json"]


def test_simulate_deterministic(scen, tmp_path):
    assert cli.main(["simulate", "--config", str(scen / "cfg.txt"), "--seed", "4", "--out", str(tmp_path)]) == 0
    for name in ("detections.jsonl", "groundtruth.txt", "scenario.json"):
        assert (tmp_path / name).read_bytes() == (scen / "scen" / name).read_bytes()


def test_simulate_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert cli.main(["simulate", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_simulate_bad_config(tmp_path):
    (tmp_path / "c").write_text("trajectory = spiral\n")
    assert cli.main(["simulate", "--config", str(tmp_path / "c"), "--out", str(tmp_path / "o")]) == 2


def test_run_defaults(scen, tmp_path):
    out = tmp_path / "pcb"
    assert cli.main(["run", "--scenario", str(scen / "scen"), "--method", "pcb", "--out", str(out)]) == 0
    d = out / "seed_4"
    assert {p.name for p in d.iterdir()} == {"run_record.json", "estimated_trajectory.txt", "episodes.csv"}
    rec = io.read_run_record(d / "run_record.json")
    assert rec.n_fail == 20 and rec.method == "pcb" and len(rec.episodes) == 2
    assert len(io.read_trajectory(d / "estimated_trajectory.txt")) == len(rec.estimated)


def test_run_ten_seeds(scen, tmp_path):
    out = tmp_path / "many"
    assert cli.main(["run", "--scenario", str(scen / "scen"), "--method", "baseline", "--seeds", "0..9", "--out", str(out)]) == 0
    recs = sorted(out.rglob("run_record.json"))
    assert len(recs) == 10
    seeds = {io.read_run_record(p).seed for p in recs}
    assert seeds == set(range(10))


def test_params_precedence(scen, tmp_path):
    params = tmp_path / "p.txt"
    params.write_text("n_fail = 3\nd_iou = 0.8\n")
    base = ["run", "--scenario", str(scen / "scen"), "--params", str(params)]
    assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
    assert io.read_run_record(tmp_path / "a" / "seed_4" / "run_record.json").n_fail == 3
    assert cli.main(base + ["--n-fail", "5", "--out", str(tmp_path / "b")]) == 0
    assert io.read_run_record(tmp_path / "b" / "seed_4" / "run_record.json").n_fail == 5


@pytest.mark.parametrize("text", ["bogus = 1\n", "n_fail = x\n", "n_fail = 0\n", "d_iou = 2\n"])
def test_bad_params_file(scen, tmp_path, text):
    params = tmp_path / "p.txt"
    params.write_text(text)
    argv = ["run", "--scenario", str(scen / "scen"), "--params", str(params), "--out", str(tmp_path / "o")]
    assert cli.main(argv) == 2


def test_schedule_out_of_range(scen, tmp_path):
    import shutil

    d = tmp_path / "broken"
    shutil.copytree(scen / "scen", d)
    snap = read_json(d / "scenario.json")
    snap["loss_schedule"] = [10_000]
    (d / "scenario.json").write_text(json.dumps(snap))
    assert cli.main(["run", "--scenario", str(d), "--out", str(tmp_path / "o")]) == 4


def test_unreadable_inputs(tmp_path):
    assert cli.main(["run", "--scenario", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    d = tmp_path / "garbage"
    d.mkdir()
    (d / "detections.jsonl").write_text("{not json\n")
    (d / "groundtruth.txt").write_text("0 0 0 0 0 0 0 1\n")
    assert cli.main(["run", "--scenario", str(d), "--out", str(tmp_path / "o")]) == 3


def test_hand_assembled_scenario(scen, tmp_path):
    d = tmp_path / "hand"
    d.mkdir()
    for name in ("detections.jsonl", "groundtruth.txt"):
        (d / name).write_bytes((scen / "scen" / name).read_bytes())
    assert cli.main(["run", "--scenario", str(d), "--out", str(tmp_path / "o")]) == 0
    assert io.read_run_record(tmp_path / "o" / "seed_0" / "run_record.json").episodes == []


def _strip_timing(path):
    d = read_json(path)
    d.pop("timing")
    return d


def test_run_idempotent_except_timing(scen, tmp_path):
    for name in ("x", "y"):
        assert cli.main(["run", "--scenario", str(scen / "scen"), "--seeds", "1,2", "--out", str(tmp_path / name)]) == 0
    for seed in (1, 2):
        a = tmp_path / "x" / f"seed_{seed}"
        b = tmp_path / "y" / f"seed_{seed}"
        assert _strip_timing(a / "run_record.json") == _strip_timing(b / "run_record.json")
        assert (a / "estimated_trajectory.txt").read_bytes() == (b / "estimated_trajectory.txt").read_bytes()
        rows_a = [r[:-1] for r in csv.reader(open(a / "episodes.csv"))]
        rows_b = [r[:-1] for r in csv.reader(open(b / "episodes.csv"))]
        assert rows_a == rows_b


def test_eval_comparison(scen, tmp_path):
    for method in ("pcb", "baseline"):
        assert cli.main(["run", "--scenario", str(scen / "scen"), "--method", method, "--seeds", "0..2",
                         "--out", str(tmp_path / method)]) == 0
    out = tmp_path / "ev"
    assert cli.main(["eval", str(tmp_path / "pcb"), str(tmp_path / "baseline"), "--out", str(out)]) == 0
    summary = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["method"] for r in summary] == ["baseline", "pcb"]
    comp = {r[0]: r for r in csv.reader(open(out / "comparison.csv"))}
    assert {"lost_time_ratio", "candidate_ratio", "latency_ratio"} <= set(comp)


def test_eval_seed_mismatch(scen, tmp_path):
    cli.main(["run", "--scenario", str(scen / "scen"), "--method", "pcb", "--seeds", "0..1", "--out", str(tmp_path / "p")])
    cli.main(["run", "--scenario", str(scen / "scen"), "--method", "baseline", "--seeds", "2..3", "--out", str(tmp_path / "b")])
    assert cli.main(["eval", str(tmp_path / "p"), str(tmp_path / "b"), "--out", str(tmp_path / "ev")]) == 4


def test_eval_empty_and_missing(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["eval", str(tmp_path / "empty"), "--out", str(tmp_path / "ev")]) == 4
    assert cli.main(["eval", str(tmp_path / "missing"), "--out", str(tmp_path / "ev")]) == 3


def test_bench_reports_mean_and_p99(tmp_path):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--db-size", "200", "--queries", "20", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert {r["method"] for r in rows} == {"pcb", "cb", "baseline_l1"}
    assert all(float(r["mean_ms"]) > 0 and float(r["p99_ms"]) >= 0 for r in rows)
    assert all(int(r["db_size"]) == 200 for r in rows)


def test_bench_rejects_zero(tmp_path):
    assert cli.main(["bench", "--db-size", "0", "--queries", "5", "--out", str(tmp_path / "b.csv")]) == 2


@pytest.mark.parametrize("sub", ["simulate", "run", "eval", "bench"])
def test_help_documents_defaults(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([sub, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "default" in text
    if sub == "run":
        for v in ("0.5", "(default 20)", "0.9", "0.1", "1e-4", "greedy"):
            assert v in text


def test_parse_seeds():
    assert cli.parse_seeds("0..3") == [0, 1, 2, 3]
    assert cli.parse_seeds("5") == [5]
    assert cli.parse_seeds("1,4") == [1, 4]
    with pytest.raises(Exception):
        cli.parse_seeds("3..1")


def test_module_entry_and_log_level(scen, tmp_path):
    env = dict(os.environ, KPR_LOG="info")
    proc = subprocess.run(
        [sys.executable, "-m", "pcbreloc", "run", "--scenario", str(scen / "scen"), "--out", str(tmp_path / "o")],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0
    assert "INFO" in proc.stderr
    quiet = subprocess.run(
        [sys.executable, "-m", "pcbreloc", "run", "--scenario", str(scen / "scen"), "--out", str(tmp_path / "q")],
        capture_output=True, text=True, env=dict(os.environ, KPR_LOG="error"),
    )
    assert quiet.returncode == 0 and quiet.stderr == ""
