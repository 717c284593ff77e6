import pytest
from hypothesis import given
from hypothesis import strategies as st

from scgprompt.dataset import load_task, render_prompt
from scgprompt.errors import EnvelopeError, PreconditionError
from scgprompt.events import EventLog
from scgprompt.llm import ModelHandle, ModelSpec, Role, ScriptedBackend
from scgprompt.pipeline import (
    Guidance, Models, extract_envelope, forward, generate_guidance, parse_label, predict,
)
from scgprompt.scg import Scg
from scgprompt.textgrad import initial_variables

from conftest import TASKS

PANDEMIC = ("substantial decreasing", "moderate decreasing", "stable", "moderate increasing",
            "substantial increasing")
TRAFFIC = ("no apparent injury", "minor injury", "serious injury", "fatal")

GUIDANCE = "<Causal Description>\n1. [Person Status] affects [Severity]: sober driver.\n</Causal Description>"


@pytest.fixture
def traffic():
    task, table = load_task(TASKS / "traffic")
    sid = table.ids[0]
    return task, render_prompt(task, table.rows[sid], sid), initial_variables(task)


def handle(responder, role=Role.FORWARD, temperature=0.0):
    return ModelHandle(ModelSpec(role, "scripted", temperature=temperature), ScriptedBackend(responder=responder))


@pytest.mark.parametrize("raw, labels, expected", [
    ("reasoning...\n<moderate increasing>", PANDEMIC, "moderate increasing"),
    ("<FATAL>", TRAFFIC, "fatal"),
    ("I think <fatal> or <minor injury>\nanswer: fatal", TRAFFIC, "minor injury"),
    ("<  Minor   Injury >", TRAFFIC, "minor injury"),
    ("no brackets at all", TRAFFIC, None),
    ("<maybe>\n<unknown>", TRAFFIC, None),
    ("<stable> first\nthen <substantial increasing>", PANDEMIC, "substantial increasing"),
    ("", TRAFFIC, None),
])
def test_parse_label(raw, labels, expected):
    assert parse_label(raw, labels) == expected


@given(st.text())
def test_parse_label_is_total(raw):
    out = parse_label(raw, TRAFFIC)
    assert out is None or out in TRAFFIC


def test_envelope_accepts_backslash_close():
    assert extract_envelope("x <Causal Description>\n1. a\n<\\Causal Description> y") == \
        "<Causal Description>\n1. a\n</Causal Description>"
    assert extract_envelope("nothing here") is None


def test_guidance_passthrough_and_hash(traffic):
    task, x, vars_ = traffic
    model = handle(lambda r: GUIDANCE)
    g = task.initial_graph()
    z1 = generate_guidance(x, g, vars_["causal_system_prompt"], model, task.guidance_constraint)
    z2 = generate_guidance(x, g, vars_["causal_system_prompt"], model, task.guidance_constraint)
    assert z1 == z2
    assert z1.text == GUIDANCE


def test_guidance_request_layout(traffic):
    task, x, vars_ = traffic
    seen = []
    model = handle(lambda r: seen.append(r) or GUIDANCE)
    generate_guidance(x, task.initial_graph(), vars_["causal_system_prompt"], model, task.guidance_constraint)
    req = seen[0]
    assert req.content("system").startswith(task.causal_system_prompt)
    assert task.guidance_constraint in req.content("system")
    assert "<Causal Relations>\nCausal Statement 1: [Person Status] affects [Severity]." in req.content("user")
    assert x.text in req.content("user")
    assert req.temperature == 0.0


def test_guidance_reask_then_error(traffic):
    task, x, vars_ = traffic
    replies = iter(["no envelope", GUIDANCE])
    log = EventLog()
    z = generate_guidance(x, task.initial_graph(), vars_["causal_system_prompt"],
                          handle(lambda r: next(replies)), task.guidance_constraint, log)
    assert z.text == GUIDANCE
    assert [c["tag"] for c in log.of("call")] == [f"guidance::{x.sample_id}", f"guidance::{x.sample_id}::reask"]
    with pytest.raises(EnvelopeError):
        generate_guidance(x, task.initial_graph(), vars_["causal_system_prompt"],
                          handle(lambda r: "never"), task.guidance_constraint)


def test_empty_graph_still_requests_guidance(traffic):
    task, x, vars_ = traffic
    seen = []
    model = handle(lambda r: seen.append(r) or "<Causal Description>\n1. none\n</Causal Description>")
    generate_guidance(x, Scg((), task.scg_vocabulary), vars_["causal_system_prompt"], model, task.guidance_constraint)
    assert "<Causal Relations>\n\n</Causal Relations>" in seen[0].content("user")


def test_temperature_must_be_zero(traffic):
    task, x, vars_ = traffic
    with pytest.raises(PreconditionError):
        generate_guidance(x, task.initial_graph(), vars_["causal_system_prompt"],
                          handle(lambda r: GUIDANCE, temperature=0.7), task.guidance_constraint)


def test_predict_contains_case_and_guidance_verbatim(traffic):
    task, x, vars_ = traffic
    seen = []
    model = handle(lambda r: seen.append(r) or "The driver was on the wrong side.\n<fatal>")
    p = predict(x, Guidance(GUIDANCE, "h"), vars_["system_prompt"], model, task)
    assert p.label == "fatal"
    user = seen[0].content("user")
    assert x.text in user and GUIDANCE in user
    assert seen[0].content("system") == f"{task.system_prompt}\n\n{task.output_format}"


def test_predict_needs_context(traffic):
    task, x, vars_ = traffic
    with pytest.raises(PreconditionError):
        predict(x, None, vars_["system_prompt"], handle(lambda r: "<fatal>"), task)


def _models(responder):
    backend = ScriptedBackend(responder=responder)
    fwd = ModelHandle(ModelSpec(Role.FORWARD, "f"), backend)
    return Models(fwd, ModelHandle(ModelSpec(Role.BACKWARD, "b"), backend))


def test_full_forward_two_calls(traffic):
    task, x, vars_ = traffic

    def responder(r):
        return GUIDANCE if r.tag.startswith("guidance") else "<minor injury>"

    t = forward(x, task.initial_graph(), vars_["system_prompt"], vars_["causal_system_prompt"],
                _models(responder), task)
    assert t.calls == 2
    assert t.label == "minor injury"
    assert t.guidance.text == GUIDANCE
    assert t.participated("scg") and t.participated("causal_system_prompt")


def test_single_model_forward_inlines_graph(traffic):
    task, x, vars_ = traffic
    seen = []
    t = forward(x, task.initial_graph(), vars_["system_prompt"], vars_["causal_system_prompt"],
                _models(lambda r: seen.append(r) or "<fatal>"), task, single_model=True)
    assert t.calls == 1 and t.guidance is None
    assert "<Causal Relations>\nCausal Statement 1:" in seen[0].content("user")
    assert t.participated("scg") and not t.participated("causal_system_prompt")


def test_forward_is_deterministic(traffic):
    task, x, vars_ = traffic

    def responder(r):
        return GUIDANCE if r.tag.startswith("guidance") else "<fatal>"

    logs = []
    for _ in range(2):
        log = EventLog()
        forward(x, task.initial_graph(), vars_["system_prompt"], vars_["causal_system_prompt"],
                _models(responder), task, log=log)
        logs.append(log.to_bytes())
    assert logs[0] == logs[1]
