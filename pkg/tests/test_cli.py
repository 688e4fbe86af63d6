import csv
import json

import pytest

from corl_tsn.cli import main

TINY = """[run]
benchmark = gridkey5
n_trajectories = 12

[method]
epochs = 1
embed_dim = 16
n_layers = 1
eval_episodes = 2
routing_batches = 1
batch_size = 32
memory_size = 16
"""


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_is_reproducible_and_validates(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", "--config", "gridkey5", "--seed", "1", "--out", str(a), "--n-trajectories", "5"]) == 0
    assert main(["generate", "--config", "gridkey5", "--seed", "1", "--out", str(b), "--n-trajectories", "5"]) == 0
    assert sorted(p.name for p in a.iterdir() if p.is_dir()) == ["gk1", "gk2", "gk3", "gk4", "gk5"]
    assert _tree_bytes(a) == _tree_bytes(b)
    assert main(["validate", str(a)]) == 0
    assert "max gap 0" in capsys.readouterr().out


def test_validate_flags_tampered_rewards(tmp_path):
    out = tmp_path / "d"
    main(["generate", "--config", "gridkey5", "--out", str(out), "--n-trajectories", "3"])
    spec = (out / "gk1" / "task_spec.txt").read_text()
    (out / "gk1" / "task_spec.txt").write_text(spec.replace("env.theta = 0.0", "env.theta = 1.0"))
    assert main(["validate", str(out / "gk1")]) == 2


def test_missing_inputs_are_usage_errors(tmp_path, tiny_config):
    assert main(["generate", "--config", str(tmp_path / "nope.ini")]) == 1
    assert main(["run", "--config", str(tiny_config), "--variant", "mystery", "--out", str(tmp_path / "x")]) == 1
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == 1
    assert main(["run", "--config", str(tiny_config), "--variant", "affinity_a", "--out", str(tmp_path / "x")]) == 1
    assert main(["report"]) == 1
    assert main(["validate"]) == 1
    assert main(["frobnicate"]) == 1


def test_run_and_report(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("CORL_TSN_OUT", str(tmp_path / "root"))
    assert main(["run", "--config", str(tiny_config), "--variant", "tsn_core", "--seed", "3", "--out", "core"]) == 0
    core = tmp_path / "root" / "core"
    rec = json.loads((core / "results.json").read_text())
    assert rec["copies"] == 1 and rec["metrics"]["avg_forgetting"] == 0.0
    assert rec["config"]["seed"] == 3 and rec["config"]["variant"] == "tsn_core"
    assert rec["run"]["n_trajectories"] == 12
    assert len(rec["routing"]) == 5 and len(rec["performance"]) == 5
    assert main(["run", "--config", str(tiny_config), "--variant", "naive", "--seed", "3", "--out", "naive"]) == 0

    assert main(["report", str(core), str(tmp_path / "root" / "naive" / "results.json"), "--out", "rep"]) == 0
    rep = tmp_path / "root" / "rep"
    rows = list(csv.DictReader(open(rep / "metrics.csv")))
    assert len(rows) == 2 and {r["metric"] for r in rows} == {"norm_avg"}
    curves = list(csv.DictReader(open(rep / "curves.csv")))
    per_task = {}
    for r in curves:
        per_task.setdefault((r["run"], r["task"]), []).append(int(r["stage"]))
    assert len(per_task) == 10 and all(v == [1, 2, 3, 4, 5] for v in per_task.values())
    assert (rep / "metrics.txt").read_text().count("\n") == 3


def test_report_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"performance": [[1]]}))
    assert main(["report", str(bad), "--out", str(tmp_path / "r")]) == 1


def test_run_from_generated_tree_matches_in_memory(tmp_path, tiny_config):
    data = tmp_path / "data"
    assert main(["generate", "--config", "gridkey5", "--seed", "2", "--out", str(data), "--n-trajectories", "12"]) == 0
    common = ["run", "--config", str(tiny_config), "--variant", "tsn_core", "--seed", "2", "--no-checkpoint"]
    assert main(common + ["--out", str(tmp_path / "mem")]) == 0
    assert main(common + ["--data", str(data), "--out", str(tmp_path / "disk")]) == 0
    a = json.loads((tmp_path / "mem" / "results.json").read_text())
    b = json.loads((tmp_path / "disk" / "results.json").read_text())
    assert a["performance"] == b["performance"]
