import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scgprompt.dataset import Split
from scgprompt.errors import BackendError
from scgprompt.events import EventLog
from scgprompt.llm import ScriptedBackend
from scgprompt.optimizer import (
    Checkpoint, Mode, Optimizer, OptimizerConfig, load_state, run, triple_hash,
)
from scgprompt.scenarios import (
    PLANTED_HEADER, GatingResponder, PlantedResponder, answer, expected_gating_trace, gating_backend,
    planted_backend, planted_split, planted_task, scripted_models,
)
from scgprompt.scg import render_scg


def planted_run(planted, log=None, **cfg):
    task, table, split = planted
    cfg = OptimizerConfig(**{"steps": 6, "repeats": 1, **cfg})
    return run(cfg, task, table, split, scripted_models(planted_backend(task, table, split)), log)


def calls(log, **match):
    return [c for c in log.of("call") if all(c.get(k) == v for k, v in match.items())]


# -- configuration -------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [{"steps": -1}, {"batch_size": 0}, {"repeats": 0}, {"eval_concurrency": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimizerConfig(**kwargs)


def test_config_round_trip():
    cfg = OptimizerConfig(steps=3, mode=Mode.NO_ITERATIVE)
    assert OptimizerConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_triple_hash_distinguishes_single_model():
    assert triple_hash("a", "b", "c") != triple_hash("a", "b", "c", single_model=True)
    assert triple_hash("a", "b", "c") != triple_hash("a", "bc", "")


# -- evaluation --------------------------------------------------------------------


def test_evaluate_41_of_100():
    task, table = planted_task(n_per_label=40)
    ids = table.ids[:100]
    split = Split(tuple(table.ids[100:]), tuple(ids), (), 0)
    right = set(ids[:41])
    golds = table.golds

    def responder(r):
        sid = r.tag.split("::")[1]
        if r.tag.startswith("guidance"):
            return "<Causal Description>\n1. x\n</Causal Description>"
        wrong = next(lab for lab in task.labels if lab != golds[sid])
        return answer(golds[sid] if sid in right else wrong)

    opt = Optimizer(task, table, split, scripted_models(ScriptedBackend(responder=responder)), OptimizerConfig())
    state = opt.initial_state()
    assert state.val_metrics.accuracy == 0.41


def test_cache_makes_reevaluation_free(planted):
    task, table, split = planted
    log = EventLog()
    opt = Optimizer(task, table, split, scripted_models(planted_backend(task, table, split)), OptimizerConfig(), log)
    state = opt.initial_state()
    before = len(log.of("call"))
    m = opt.evaluate(state.p_sys, state.p_cau, state.g, split.val)
    assert len(log.of("call")) == before
    assert m == state.val_metrics
    assert log.of("evaluate")[-1]["misses"] == 0


def test_backend_error_keeps_partial_cache(planted):
    task, table, split = planted
    bad = split.val[10]
    inner = PlantedResponder(table, split)
    fail = [True]

    def responder(r):
        if fail[0] and r.tag == f"predict::{bad}":
            raise BackendError("server gone")
        return inner(r)

    log = EventLog()
    opt = Optimizer(task, table, split, scripted_models(ScriptedBackend(responder=responder)), OptimizerConfig(), log)
    with pytest.raises(BackendError):
        opt.initial_state()
    assert len(opt.cache) == 10
    fail[0] = False
    opt.initial_state()
    assert log.of("evaluate")[-1]["misses"] == len(split.val) - 10


def test_concurrency_is_deterministic(planted):
    logs = []
    for conc in (1, 4, 4):
        log = EventLog()
        planted_run(planted, log, eval_concurrency=conc)
        logs.append([r for r in log.records if r["event"] in ("call", "forward", "decision")])
    assert logs[0] == logs[1] == logs[2]


# -- the gate ---------------------------------------------------------------------


def test_zero_steps_is_plain_evaluation(planted):
    log = EventLog()
    result = planted_run(planted, log, steps=0)
    assert result.best.step == 0
    assert calls(log, phase="backward") == [] and calls(log, phase="train") == []
    assert result.best.metrics["val"]["weighted_f1"] == pytest.approx(0.4)
    assert "test" in result.best.metrics


def test_planted_edge_found(planted):
    log = EventLog()
    result = planted_run(planted, log)
    assert PLANTED_HEADER in result.best.scg_text
    assert result.best.metrics["val"]["weighted_f1"] >= 0.7
    reasons = [d["reason"] for d in log.of("decision") if d["stage"] == "2"]
    assert reasons[:3] == ["no-gain", "rejected-edit", "improved"]


def test_equal_score_rejected(planted):
    task, table, split = planted
    # every proposal lands on the baseline level, so f' == f at each gate
    backend = gating_backend(task, table, split, sys_levels=(4,), cau_offsets=(0,))
    log = EventLog()
    result = run(OptimizerConfig(steps=3, repeats=1), task, table, split, scripted_models(backend), log)
    decisions = log.of("decision")
    assert len(decisions) == 6
    assert all(d["reason"] == "no-gain" and d["f_candidate"] == d["f_before"] for d in decisions)
    assert result.best.p_sys == task.system_prompt


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=1, max_size=5), st.lists(st.integers(-3, 3), min_size=1, max_size=5))
def test_gating_matches_reference(sys_levels, cau_offsets):
    task, table = planted_task()
    split = planted_split(table)
    backend = ScriptedBackend(responder=GatingResponder(table, split, sys_levels, cau_offsets))
    log = EventLog()
    steps = 4
    run(OptimizerConfig(steps=steps, repeats=1), task, table, split, scripted_models(backend), log)
    committed = [c["best_f1"] for c in log.of("checkpoint")]
    assert committed == pytest.approx(expected_gating_trace(sys_levels, cau_offsets, steps))
    assert all(b > a for a, b in zip(committed, committed[1:]))


def test_length_guard(planted):
    task, table, split = planted
    inner = PlantedResponder(table, split)

    def responder(r):
        if r.tag == "apply::system_prompt":
            return "<IMPROVED VARIABLE>" + "word " * 2000 + "</IMPROVED VARIABLE>"
        return inner(r)

    log = EventLog()
    run(OptimizerConfig(steps=1, repeats=1, mode=Mode.FIXED_GRAPH_SIDE), task, table, split,
        scripted_models(ScriptedBackend(responder=responder)), log)
    [d] = log.of("decision")
    assert d["reason"] == "too-long" and d["f_candidate"] is None


def test_batches_are_seeded(planted):
    task, table, split = planted
    opt = Optimizer(task, table, split, None, OptimizerConfig(batch_size=4))
    assert opt.sample_batch(0, 1) == opt.sample_batch(0, 1)
    assert opt.sample_batch(0, 1) != opt.sample_batch(0, 2)
    assert set(opt.sample_batch(1, 3)) <= set(split.train)


# -- modes -----------------------------------------------------------------------


def test_single_model_one_call_per_forward(planted):
    log = EventLog()
    planted_run(planted, log, mode=Mode.SINGLE_MODEL, steps=2)
    forwards = log.of("forward")
    assert forwards and all(f["calls"] == 1 for f in forwards)
    assert not [c for c in log.of("call") if c["tag"].startswith("guidance")]


def test_fixed_graph_side_never_changes(planted):
    log = EventLog()
    result = planted_run(planted, log, mode=Mode.FIXED_GRAPH_SIDE)
    task = planted[0]
    assert {(s["p_cau"], s["scg"]) for s in log.of("state")} == {(s["p_cau"], s["scg"]) for s in log.of("state")[:1]}
    assert result.best.p_cau == task.causal_system_prompt
    assert result.best.scg_text == render_scg(task.initial_graph())


def test_fixed_sys_prompt(planted):
    result = planted_run(planted, mode=Mode.FIXED_SYS_PROMPT)
    assert result.best.p_sys == planted[0].system_prompt
    assert PLANTED_HEADER in result.best.scg_text


def test_no_iterative_one_joint_gate(planted):
    log = EventLog()
    planted_run(planted, log, mode=Mode.NO_ITERATIVE)
    decisions = log.of("decision")
    assert len(decisions) == 6
    assert {d["stage"] for d in decisions} == {"joint"}
    assert all(d["names"] == ["system_prompt", "causal_system_prompt", "scg"] for d in decisions)


def test_no_opt_runs_no_steps(planted):
    log = EventLog()
    result = planted_run(planted, log, mode=Mode.NO_OPT)
    assert result.best.step == 0 and log.of("decision") == []


# -- repeats and checkpoints ------------------------------------------------------------


def test_best_repeat_wins(planted, monkeypatch):
    task, table, split = planted
    scores = iter([0.40, 0.45, 0.42])
    real = Optimizer.run_repeat

    def fake(self, repeat, scg=None):
        state = real(self, repeat, scg)
        return replace(state, best_f1=next(scores))

    monkeypatch.setattr(Optimizer, "run_repeat", fake)
    log = EventLog()
    result = run(OptimizerConfig(steps=0, repeats=3), task, table, split,
                 scripted_models(planted_backend(task, table, split)), log)
    assert result.best.repeat == 1
    assert len(log.of("result")) == 1
    assert len([e for e in log.of("evaluate") if e["phase"] == "test"]) == 1


def test_checkpoint_round_trip(planted, tmp_path):
    task, table, split = planted
    result = run(OptimizerConfig(steps=3, repeats=1), task, table, split,
                 scripted_models(planted_backend(task, table, split)), checkpoint_dir=tmp_path / "ckpt")
    saved = Checkpoint.load(tmp_path / "best.json")
    assert saved == result.best
    assert saved.hashes == result.best.hashes
    assert sorted(p.name for p in (tmp_path / "ckpt").iterdir())[0] == "r0_step000_01.json"
    state = load_state(saved, task, EventLog())
    assert render_scg(state.g) == saved.scg_text and state.best_f1 == saved.metrics["val"]["weighted_f1"]


def test_checkpoint_tamper_detected(planted, tmp_path):
    result = planted_run(planted, steps=0)
    doc = result.best.to_dict()
    doc["p_sys"] = "something else"
    with pytest.raises(ValueError, match="hash"):
        Checkpoint.from_dict(doc)
    doc = result.best.to_dict()
    doc["version"] = 99
    with pytest.raises(ValueError, match="version"):
        Checkpoint.from_dict(doc)
