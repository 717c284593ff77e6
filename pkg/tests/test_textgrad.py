import pytest
from hypothesis import given
from hypothesis import strategies as st

from scgprompt.dataset import load_task, render_prompt
from scgprompt.errors import MixedTarget, PreconditionError, RejectedEdit
from scgprompt.events import EventLog
from scgprompt.llm import ModelHandle, ModelSpec, Role, ScriptedBackend
from scgprompt.pipeline import Models, forward
from scgprompt.scg import parse_scg
from scgprompt.textgrad import (
    CONSTRAINTS, NO_CHANGE, SECTION_HEADERS, TextGradient, Verdict, accumulate, apply_gradient,
    compute_loss, guidance_gradient, initial_variables, is_no_change, output_gradient, variable_gradient,
)

from conftest import TASKS

GUIDANCE = "<Causal Description>\n1. [Person Status] affects [Severity]: sober driver.\n</Causal Description>"

ROAD = ("Causal Statement 4: [Road Surface] affects [Severity].\n"
        "Wet or icy surfaces lengthen stopping distance and raise the chance of a severe crash.")

CYCLIC = ("Causal Statement 1: [Driver Behavior] affects [Position].\nx\n\n"
          "Causal Statement 2: [Position] affects [Driver Behavior].\ny")


@pytest.fixture
def setup():
    task, table = load_task(TASKS / "traffic")
    sid = table.ids[0]
    x = render_prompt(task, table.rows[sid], sid)
    return task, x, initial_variables(task)


def backward_handle(responder):
    return ModelHandle(ModelSpec(Role.BACKWARD, "scripted"), ScriptedBackend(responder=responder))


def run_forward(task, x, vars_, label="<minor injury>", single=False):
    backend = ScriptedBackend(responder=lambda r: GUIDANCE if r.tag.startswith("guidance") else label)
    models = Models(ModelHandle(ModelSpec(Role.FORWARD, "f"), backend),
                    ModelHandle(ModelSpec(Role.BACKWARD, "b"), backend))
    return forward(x, task.initial_graph(), vars_["system_prompt"], vars_["causal_system_prompt"],
                   models, task, single_model=single)


@pytest.mark.parametrize("pred, gold, verdict, needle", [
    ("fatal", "fatal", Verdict.MATCH, "matches"),
    ("minor injury", "fatal", Verdict.MISMATCH, "Predicted <minor injury>"),
    (None, "fatal", Verdict.PARSE_FAILURE, "No valid label"),
])
def test_compute_loss(pred, gold, verdict, needle):
    loss = compute_loss(pred, gold)
    assert loss.verdict is verdict
    assert needle in loss.message
    assert f"<{gold}>" in loss.message or verdict is Verdict.MATCH


@pytest.mark.parametrize("text", [NO_CHANGE, "no change needed.", "  NO CHANGE NEEDED\n"])
def test_sentinel_forms(text):
    assert is_no_change(text)


def test_backward_requests_use_sections(setup):
    task, x, vars_ = setup
    trace = run_forward(task, x, vars_)
    seen = []
    bw = backward_handle(lambda r: seen.append(r) or "The BAC relation was ignored.")
    out = output_gradient(trace, compute_loss(trace.label, "fatal"), bw)
    guidance_gradient(trace, out, bw)
    variable_gradient(vars_["scg"], trace, out, bw)
    for req in seen:
        user = req.content("user")
        positions = [user.index(f"### {h}") for h in SECTION_HEADERS]
        assert positions == sorted(positions)
    assert [r.tag for r in seen] == [f"loss-feedback::{x.sample_id}", f"grad::guidance::{x.sample_id}",
                                     f"grad::scg::{x.sample_id}"]


def test_sentinel_short_circuits(setup):
    task, x, vars_ = setup
    trace = run_forward(task, x, vars_)
    log = EventLog()
    bw = backward_handle(lambda r: pytest.fail("no call expected"))
    assert guidance_gradient(trace, NO_CHANGE, bw, log) == NO_CHANGE
    g = variable_gradient(vars_["system_prompt"], trace, NO_CHANGE, bw, log)
    assert g.feedbacks == (NO_CHANGE,) and g.actionable == []
    assert log.of("call") == []


def test_variable_gradient_needs_participation(setup):
    task, x, vars_ = setup
    trace = run_forward(task, x, vars_, single=True)
    with pytest.raises(PreconditionError):
        variable_gradient(vars_["causal_system_prompt"], trace, "fix it", backward_handle(lambda r: "x"))
    with pytest.raises(PreconditionError):
        guidance_gradient(trace, "fix it", backward_handle(lambda r: "x"))


def grad(target, *fbs):
    return TextGradient(target, tuple(fbs), tuple(f"s{i}" for i in range(len(fbs))))


def test_accumulate_identity_and_mixed():
    g = grad("scg", "a")
    assert accumulate([g]) is g
    with pytest.raises(MixedTarget):
        accumulate([g, grad("system_prompt", "b")])
    with pytest.raises(ValueError):
        accumulate([])


@given(st.lists(st.lists(st.text(min_size=1, max_size=5), min_size=1, max_size=3), min_size=1, max_size=4))
def test_accumulate_concatenates(chunks):
    grads = [TextGradient("scg", tuple(c), tuple(f"{i}-{j}" for j in range(len(c)))) for i, c in enumerate(chunks)]
    total = accumulate(grads)
    assert list(total.feedbacks) == [fb for c in chunks for fb in c]
    assert len(total.provenance) == len(total.feedbacks)
    # split accumulation agrees with one-shot accumulation
    if len(grads) > 1:
        assert accumulate([accumulate(grads[:1]), accumulate(grads[1:])]) == total


def test_apply_adds_statement(setup):
    task, x, vars_ = setup
    var = vars_["scg"]
    seen = []
    bw = backward_handle(lambda r: seen.append(r) or f"<IMPROVED VARIABLE>\n{var.value}\n\n{ROAD}\n</IMPROVED VARIABLE>")
    out = apply_gradient(var, grad("scg", "Road surface matters for this case."), bw, candidates=task.scg_vocabulary)
    g = parse_scg(out)
    assert ("Road Surface", "Severity") in g.edges and len(g) == 4
    assert out.startswith("Causal Statement 1: [Person Status] affects [Severity].")
    assert "### " + CONSTRAINTS in seen[0].content("user")
    assert "[1] Add new causal relations" in seen[0].content("user")
    assert var.value == task.initial_scg


def test_apply_cyclic_graph_rejected_after_repair(setup):
    task, x, vars_ = setup
    log = EventLog()
    bw = backward_handle(lambda r: f"<IMPROVED VARIABLE>{CYCLIC}</IMPROVED VARIABLE>")
    with pytest.raises(RejectedEdit):
        apply_gradient(vars_["scg"], grad("scg", "add a loop"), bw, log, candidates=task.scg_vocabulary)
    assert [c["tag"] for c in log.of("call")] == ["apply::scg", "apply::scg::repair"]


def test_apply_repair_can_succeed(setup):
    task, x, vars_ = setup
    var = vars_["scg"]
    replies = iter([CYCLIC, f"<IMPROVED VARIABLE>{var.value}\n\n{ROAD}</IMPROVED VARIABLE>"])
    seen = []
    out = apply_gradient(var, grad("scg", "x"), backward_handle(lambda r: seen.append(r) or next(replies)),
                         candidates=task.scg_vocabulary)
    assert len(parse_scg(out)) == 4
    assert "CycleError" in seen[1].messages[-1][1]


def test_apply_unknown_node_rejected(setup):
    task, x, vars_ = setup
    bad = "<IMPROVED VARIABLE>Causal Statement 1: [Moon Phase] affects [Severity].\nx</IMPROVED VARIABLE>"
    with pytest.raises(RejectedEdit):
        apply_gradient(vars_["scg"], grad("scg", "x"), backward_handle(lambda r: bad), candidates=task.scg_vocabulary)


def test_apply_all_sentinel_returns_value(setup):
    task, x, vars_ = setup
    var = vars_["system_prompt"]
    bw = backward_handle(lambda r: pytest.fail("no call expected"))
    assert apply_gradient(var, grad("system_prompt", NO_CHANGE, NO_CHANGE), bw) == var.value


def test_apply_prompt_without_tags(setup):
    task, x, vars_ = setup
    var = vars_["system_prompt"]
    out = apply_gradient(var, grad("system_prompt", "mention alcohol"), backward_handle(lambda r: "  New prompt. "))
    assert out == "New prompt."


def test_apply_wrong_target(setup):
    task, x, vars_ = setup
    with pytest.raises(PreconditionError):
        apply_gradient(vars_["scg"], grad("system_prompt", "x"), backward_handle(lambda r: "x"))


def test_commit_records_history(setup):
    _, _, vars_ = setup
    v = vars_["system_prompt"].committed("new", 3)
    assert v.value == "new" and v.history == ((3, vars_["system_prompt"].value),)
