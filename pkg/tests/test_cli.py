import csv
import json

import pytest

from scgprompt.cli import main
from scgprompt.optimizer import Checkpoint

from conftest import DATA, TASKS

SMALL = ["--val-n", "30", "--test-n", "30", "--repeats", "1"]


@pytest.fixture
def task_dir(tmp_path):
    out = tmp_path / "planted"
    assert main(["init-task", "--example", "planted", "--out", str(out), "--val-n", "30", "--test-n", "30"]) == 0
    return out


def run_dir(out, verb):
    [d] = [p for p in out.iterdir() if p.name.endswith(f"-{verb}")]
    return d


def cli(verb, task_dir, tmp_path, *extra):
    out = tmp_path / "runs"
    code = main([verb, "--task", str(task_dir), *SMALL, "--out", str(out), *extra])
    return code, (run_dir(out, verb) if code == 0 else None)


def test_init_task_writes_files(task_dir, capsys):
    assert {p.name for p in task_dir.iterdir()} == {"task.yaml", "data.csv", "split.json"}
    split = json.loads((task_dir / "split.json").read_text())
    assert (len(split["val"]), len(split["test"])) == (30, 30)


def test_init_task_domain(tmp_path, capsys):
    assert main(["init-task", "--task", str(TASKS / "traffic"), "--out", str(tmp_path / "t"),
                 "--val-n", "0", "--test-n", "0"]) == 0
    assert "initial graph: 3 statements, 3 edges" in capsys.readouterr().out


def test_optimize_run_directory(task_dir, tmp_path, capsys):
    code, d = cli("optimize", task_dir, tmp_path, "--steps", "4")
    assert code == 0
    names = {p.name for p in d.iterdir()}
    assert {"config.json", "split.json", "events.jsonl", "cassette.jsonl", "ledger.json",
            "checkpoints", "best.json", "summary.csv"} <= names
    best = Checkpoint.load(d / "best.json")
    assert "[Sensor Reading] affects [Outcome Level]" in best.scg_text
    config = json.loads((d / "config.json").read_text())
    assert config["flags"]["steps"] == 4 and "api_key" not in json.dumps(config)


def test_zero_steps_equals_eval(task_dir, tmp_path, capsys):
    _, opt = cli("optimize", task_dir, tmp_path, "--steps", "0")
    _, ev = cli("eval", task_dir, tmp_path)
    a = Checkpoint.load(opt / "best.json").metrics
    b = Checkpoint.load(ev / "best.json").metrics
    assert a["val"] == b["val"] and a["test"] == b["test"]


def test_eval_checkpoint(task_dir, tmp_path, capsys):
    _, opt = cli("optimize", task_dir, tmp_path, "--steps", "4")
    _, ev = cli("eval", task_dir, tmp_path, "--checkpoint", str(opt / "best.json"))
    assert Checkpoint.load(ev / "best.json").metrics["val"]["weighted_f1"] >= 0.7


def test_scg_diff_pandemic(tmp_path, capsys):
    old = tmp_path / "old.txt"
    from scgprompt.dataset import load_task
    task, _ = load_task(TASKS / "pandemic")
    old.write_text(task.initial_scg)
    assert main(["scg-diff", str(old), str(DATA / "pandemic_refined_scg.txt")]) == 0
    out = capsys.readouterr().out
    assert "+ [Healthcare System Condition] affects [Hospitalization per 100k]" in out
    assert "- [Population Immunity] affects [Hospitalization per 100k]" in out


def test_scg_diff_identical(tmp_path, capsys):
    p = DATA / "pandemic_refined_scg.txt"
    assert main(["scg-diff", str(p), str(p)]) == 0
    assert "identical" in capsys.readouterr().out


def test_ablate_table(task_dir, tmp_path, capsys):
    code, d = cli("ablate", task_dir, tmp_path, "--steps", "3")
    assert code == 0
    rows = list(csv.reader((d / "summary.csv").open()))
    assert [r[0] for r in rows[1:]] == ["full", "single", "fixed-graph", "fixed-sys", "no-iter", "no-opt"]
    assert {p.name for p in (d / "settings").iterdir()} == {"full", "single", "fixed-graph", "fixed-sys",
                                                            "no-iter", "no-opt"}


def test_completeness_table(task_dir, tmp_path, capsys):
    code, d = cli("completeness", task_dir, tmp_path, "--steps", "3")
    assert code == 0
    rows = list(csv.reader((d / "summary.csv").open()))
    assert [r[0] for r in rows[1:]] == ["reversed", "empty", "frac=0.33", "frac=0.66", "full"]


def test_cost_audit(task_dir, tmp_path, capsys):
    _, d = cli("optimize", task_dir, tmp_path, "--steps", "3", "--price-in", "0.15", "--price-out", "0.6")
    capsys.readouterr()
    assert main(["cost", "--run", str(d)]) == 0
    out = capsys.readouterr().out
    ledger = json.loads((d / "ledger.json").read_text())
    assert f"total: ${ledger['total_usd']}" in out
    assert "audit" in out


def test_replay_reproduces(task_dir, tmp_path, capsys):
    _, d = cli("optimize", task_dir, tmp_path, "--steps", "4")
    assert main(["replay", "--run", str(d)]) == 0
    assert "reproduced" in capsys.readouterr().out
    assert (d / "replay" / "events.jsonl").read_bytes() == (d / "events.jsonl").read_bytes()


def test_replay_detects_task_change(task_dir, tmp_path, capsys):
    _, d = cli("optimize", task_dir, tmp_path, "--steps", "1")
    with open(task_dir / "data.csv", "a") as fh:
        fh.write("p999,50.0,low,clear,3,Medium\n")
    assert main(["replay", "--run", str(d)]) == 2


@pytest.mark.parametrize("extra, needle", [
    (["--steps", "-1"], "--steps"),
    (["--batch", "0"], "--batch"),
    (["--price-in", "cheap"], "--price-in"),
    (["--backend", "replay"], "--cassette"),
    (["--backend", "live"], "--endpoint"),
])
def test_flag_validation(task_dir, tmp_path, capsys, extra, needle):
    code, _ = cli("optimize", task_dir, tmp_path, *extra)
    assert code == 2
    assert needle in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()


def test_live_without_key(task_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("EGO_API_KEY_DEFAULT", raising=False)
    code, _ = cli("optimize", task_dir, tmp_path, "--backend", "live", "--endpoint", "https://example.invalid/v1")
    assert code == 2
    assert "EGO_API_KEY_DEFAULT" in capsys.readouterr().err


def test_script_miss_exit_code(task_dir, tmp_path, capsys):
    script = tmp_path / "empty.json"
    script.write_text("{}")
    code, _ = cli("optimize", task_dir, tmp_path, "--script", str(script))
    assert code == 3


def test_task_name_resolves_under_tasks(tmp_path, monkeypatch, capsys):
    (tmp_path / "tasks").mkdir()
    assert main(["init-task", "--example", "planted", "--out", str(tmp_path / "tasks" / "demo"),
                 "--val-n", "30", "--test-n", "30"]) == 0
    monkeypatch.chdir(tmp_path)
    assert main(["eval", "--task", "demo", *SMALL, "--out", "runs"]) == 0
    config = json.loads((run_dir(tmp_path / "runs", "eval") / "config.json").read_text())
    assert config["task_path"].endswith("tasks/demo")
