"""Text losses, backward feedback and gradient application.

The backward engine is prompted with five fixed sections (see
``SECTION_HEADERS``); every request in this module uses that layout so
scripted backends can key on it.  Nothing here mutates a
:class:`PromptVariable`; committing a candidate is the optimizer's call.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

from .dataset import TaskSpec
from .errors import MixedTarget, PreconditionError, RejectedEdit, ScgError
from .llm import ModelHandle
from .pipeline import ForwardTrace
from .scg import parse_scg, render_scg

NO_CHANGE = "NO CHANGE NEEDED"

ROLE = "ROLE"
CURRENT_VALUE = "CURRENT VALUE"
TRACE = "TRACE"
FEEDBACK = "FEEDBACK ON OUTPUT"
CONSTRAINTS = "CONSTRAINTS"
VALIDATION_ERROR = "VALIDATION ERROR"
SECTION_HEADERS = (ROLE, CURRENT_VALUE, TRACE, FEEDBACK, CONSTRAINTS)

IMPROVED_OPEN = "<IMPROVED VARIABLE>"
IMPROVED_CLOSE = "</IMPROVED VARIABLE>"
_IMPROVED = re.compile(r"<IMPROVED VARIABLE>(.*?)</IMPROVED VARIABLE>", re.DOTALL)

# Default system prompt for the backward engine.  Its wording is configuration.
BACKWARD_SYSTEM_PROMPT = (
    "You are the feedback engine of a text optimisation loop. A pipeline of language-model "
    "calls produced an output for one case. You receive the role and current value of one "
    "component of that pipeline, an excerpt of the run, and feedback on the final output. "
    "Give concise, concrete criticism of how the component should change so that the final "
    f"output improves. If no change is warranted, reply exactly: {NO_CHANGE}"
)

OPTIMIZER_SYSTEM_PROMPT = (
    "You improve one text component of a language-model pipeline using the feedback provided. "
    "Respect every constraint. Return only the improved component between "
    f"{IMPROVED_OPEN} and {IMPROVED_CLOSE}."
)

ROLES = {
    "system_prompt": "system prompt instructing the prediction model to combine the case "
                     "description with the reasoning guidance",
    "causal_system_prompt": "causal system prompt steering the graph-description model to turn "
                            "the causal graph into case-specific reasoning guidance",
    "scg": "semantic causal graph of expert causal statements used to derive reasoning guidance",
}


class Verdict(enum.Enum):
    MATCH = "match"
    MISMATCH = "mismatch"
    PARSE_FAILURE = "parse_failure"


@dataclass(frozen=True)
class TextLoss:
    verdict: Verdict
    message: str
    gold: str
    predicted: Optional[str] = None

    def __post_init__(self):
        if self.verdict is Verdict.MATCH and self.predicted != self.gold:
            raise ValueError("a match loss needs predicted == gold")


def compute_loss(predicted: Optional[str], gold: str) -> TextLoss:
    if predicted is None:
        return TextLoss(Verdict.PARSE_FAILURE,
                        f"No valid label could be extracted from the response. The ground truth is <{gold}>.",
                        gold)
    if predicted == gold:
        return TextLoss(Verdict.MATCH, "Prediction matches the ground truth.", gold, predicted)
    return TextLoss(Verdict.MISMATCH,
                    f"Prediction does not match. Predicted <{predicted}>, but the ground truth is <{gold}>.",
                    gold, predicted)


@dataclass(frozen=True)
class PromptVariable:
    name: str
    role: str
    value: str
    constraints: str = ""
    history: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if self.name != "scg" and not self.value.strip():
            raise ValueError(f"prompt variable {self.name!r} must be non-empty")

    def committed(self, value: str, step: int) -> "PromptVariable":
        return replace(self, value=value, history=self.history + ((step, self.value),))


@dataclass(frozen=True)
class TextGradient:
    target: str
    feedbacks: tuple[str, ...]
    provenance: tuple[str, ...]

    def __post_init__(self):
        if len(self.feedbacks) != len(self.provenance) or not self.feedbacks:
            raise ValueError("a gradient needs one provenance id per feedback, and at least one")

    @property
    def actionable(self) -> list[tuple[str, str]]:
        return [(sid, fb) for sid, fb in zip(self.provenance, self.feedbacks) if not is_no_change(fb)]


def is_no_change(feedback: str) -> bool:
    return feedback.strip().rstrip(".").upper() == NO_CHANGE


def format_sections(sections: Iterable[tuple[str, str]]) -> str:
    return "\n\n".join(f"### {head}\n{body.strip() if body.strip() else '(empty)'}" for head, body in sections)


def _excerpt(trace: ForwardTrace) -> str:
    parts = [trace.prompt.text]
    if trace.guidance is not None:
        parts.append(trace.guidance.text)
    elif trace.single_model:
        parts.append(f"<Causal Relations>\n{trace.scg_text}\n</Causal Relations>")
    parts.append(f"<Prediction>\n{trace.prediction_response}\n</Prediction>")
    return "\n\n".join(parts)


def _ask(backward: ModelHandle, sections, tag: str, log, system: str = BACKWARD_SYSTEM_PROMPT) -> str:
    response = backward.chat([("system", system), ("user", format_sections(sections))], tag=tag, log=log)
    return response.content.strip()


def output_gradient(trace: ForwardTrace, loss: TextLoss, backward: ModelHandle, log=None) -> str:
    """Feedback on the prediction itself given the loss."""
    sections = [
        (ROLE, "final prediction of the prediction model for one case"),
        (CURRENT_VALUE, trace.prediction_response),
        (TRACE, trace.prompt.text),
        (FEEDBACK, loss.message),
        (CONSTRAINTS, f"If the prediction needs no change, reply exactly: {NO_CHANGE}"),
    ]
    return _ask(backward, sections, f"loss-feedback::{trace.sample_id}", log)


def guidance_gradient(trace: ForwardTrace, out_grad: str, backward: ModelHandle, log=None) -> str:
    """Feedback on the reasoning guidance, through the prediction stage."""
    if trace.guidance is None:
        raise PreconditionError(f"sample {trace.sample_id}: no guidance stage in this trace")
    if is_no_change(out_grad):
        return NO_CHANGE
    sections = [
        (ROLE, "case-specific reasoning guidance generated from the causal graph"),
        (CURRENT_VALUE, trace.guidance.text),
        (TRACE, f"{trace.prompt.text}\n\n<Prediction>\n{trace.prediction_response}\n</Prediction>"),
        (FEEDBACK, out_grad),
        (CONSTRAINTS, f"If the guidance needs no change, reply exactly: {NO_CHANGE}"),
    ]
    return _ask(backward, sections, f"grad::guidance::{trace.sample_id}", log)


def variable_gradient(var: PromptVariable, trace: ForwardTrace, out_grad: str,
                      backward: ModelHandle, log=None) -> TextGradient:
    """Per-sample feedback for one variable.

    ``out_grad`` is the feedback on the stage ``var`` feeds: the prediction
    for the system prompt (or for the graph in single-model runs), the
    guidance for the causal prompt and the graph.
    """
    if not trace.participated(var.name):
        raise PreconditionError(f"variable {var.name!r} did not take part in sample {trace.sample_id}")
    if is_no_change(out_grad):
        return TextGradient(var.name, (NO_CHANGE,), (trace.sample_id,))
    sections = [
        (ROLE, var.role),
        (CURRENT_VALUE, var.value),
        (TRACE, _excerpt(trace)),
        (FEEDBACK, out_grad),
        (CONSTRAINTS, f"Explain how the {var.role} should change. If it needs no change, reply exactly: {NO_CHANGE}"),
    ]
    feedback = _ask(backward, sections, f"grad::{var.name}::{trace.sample_id}", log)
    return TextGradient(var.name, (feedback,), (trace.sample_id,))


def accumulate(grads: Sequence[TextGradient]) -> TextGradient:
    if not grads:
        raise ValueError("nothing to accumulate")
    targets = {g.target for g in grads}
    if len(targets) != 1:
        raise MixedTarget(f"cannot accumulate gradients for {sorted(targets)}")
    if len(grads) == 1:
        return grads[0]
    return TextGradient(
        grads[0].target,
        tuple(fb for g in grads for fb in g.feedbacks),
        tuple(p for g in grads for p in g.provenance),
    )


def _extract(content: str) -> str:
    m = _IMPROVED.search(content)
    return (m.group(1) if m else content).strip()


def apply_gradient(var: PromptVariable, grad: TextGradient, backward: ModelHandle, log=None,
                   candidates: Optional[Iterable[str]] = None) -> str:
    """Ask the backward engine for a revised value; returns the candidate only.

    For the graph the candidate must parse and validate.  One repair request
    carrying the validation error is made before giving up with
    :class:`RejectedEdit`.  Graph candidates come back in canonical form.
    """
    if grad.target != var.name:
        raise PreconditionError(f"gradient for {grad.target!r} applied to {var.name!r}")
    useful = grad.actionable
    if not useful:
        return var.value
    feedback = "\n\n".join(f"Feedback {i} (sample {sid}):\n{fb}" for i, (sid, fb) in enumerate(useful, 1))
    sections = [
        (ROLE, var.role),
        (CURRENT_VALUE, var.value),
        (TRACE, "samples: " + ", ".join(sid for sid, _ in useful)),
        (FEEDBACK, feedback),
        (CONSTRAINTS, var.constraints),
    ]
    tag = f"apply::{var.name}"
    messages = [("system", OPTIMIZER_SYSTEM_PROMPT), ("user", format_sections(sections))]
    content = backward.chat(messages, tag=tag, log=log).content
    candidate = _extract(content)
    if var.name != "scg":
        if not candidate:
            raise RejectedEdit(f"empty candidate for {var.name}")
        return candidate

    vocab = frozenset(candidates) if candidates is not None else None
    try:
        return render_scg(parse_scg(candidate, vocab))
    except ScgError as exc:
        error = f"{type(exc).__name__}: {exc}"
    messages += [("assistant", content),
                 ("user", format_sections([(VALIDATION_ERROR, error), (CONSTRAINTS, var.constraints)]))]
    content = backward.chat(messages, tag=f"{tag}::repair", log=log).content
    try:
        return render_scg(parse_scg(_extract(content), vocab))
    except ScgError as exc:
        raise RejectedEdit(f"graph candidate rejected after repair: {type(exc).__name__}: {exc}") from exc


# -- constraint blocks ------------------------------------------------------------


def system_prompt_constraints(task: TaskSpec) -> str:
    return (
        "Keep the prompt general: it is shared by every case, so do not mention specific cases. "
        "The output format is appended separately and fixed; do not restate or change it. "
        f"Valid labels: {', '.join(task.labels)}."
    )


def causal_prompt_constraints(task: TaskSpec) -> str:
    return (
        "Keep the prompt general across cases. The guidance format is fixed and appended "
        "separately:\n" + task.guidance_constraint
    )


def scg_constraints(task: TaskSpec) -> str:
    nodes = "\n".join(f"- [{n}]" for n in task.candidates)
    outcome = f"\nThe prediction target may also appear as a node: [{task.outcome_node}]" if task.outcome_node else ""
    return f"""Causal Relations Guidelines
Only include causal relations between nodes for which corresponding information is available in the input description:
{nodes}{outcome}

Operations
You can only use the following operations:
[1] Add new causal relations if they are clearly supported by the input. Do not make assumptions without evidence. Both nodes must come from the list above.
[2] Modify existing causal relations: replace a link with a more accurate one, or update the explanation for clarity or correctness.
[3] Delete any causal relation that is unsupported or may negatively impact model inference. Remove both the relation and its explanation.

The graph must stay acyclic. Write the full revised graph in this format, one statement per paragraph:
Causal Statement 1: [Node A] affects [Node B].
Explanation of how [Node A] affects [Node B]."""


def initial_variables(task: TaskSpec, scg_text: Optional[str] = None) -> dict[str, PromptVariable]:
    return {
        "system_prompt": PromptVariable("system_prompt", ROLES["system_prompt"], task.system_prompt,
                                        system_prompt_constraints(task)),
        "causal_system_prompt": PromptVariable("causal_system_prompt", ROLES["causal_system_prompt"],
                                               task.causal_system_prompt, causal_prompt_constraints(task)),
        "scg": PromptVariable("scg", ROLES["scg"],
                              task.initial_scg if scg_text is None else scg_text, scg_constraints(task)),
    }
