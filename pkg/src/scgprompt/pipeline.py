"""Two-stage forward pass: instance guidance from the graph, then prediction.

Stage one asks the graph-description model to distil the causal graph into a
numbered guidance block for one case.  Stage two asks the predictor for a
label given the case and that guidance.  Both run at temperature 0 so the
guidance is a function of (case, graph, causal prompt).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .dataset import OrganizedPrompt, TaskSpec, normalize_label
from .errors import EnvelopeError, PreconditionError
from .llm import ModelHandle
from .scg import Scg, render_scg

ENVELOPE_OPEN = "<Causal Description>"
ENVELOPE_CLOSE = "</Causal Description>"
_ENVELOPE = re.compile(r"<Causal Description>(.*?)<\s*[/\\]\s*Causal Description>", re.DOTALL | re.IGNORECASE)
_TOKEN = re.compile(r"<\s*([^<>\n]+?)\s*>")

REASK = ("Your previous answer did not follow the required format. "
         "Reply again and place the full guidance between <Causal Description> and </Causal Description>.")


@dataclass(frozen=True)
class Guidance:
    text: str
    source_hash: str


@dataclass(frozen=True)
class Prediction:
    raw: str
    label: Optional[str]


@dataclass
class Models:
    """Model slots.  The graph-description model defaults to the forward model."""

    forward: ModelHandle
    backward: ModelHandle
    graph: Optional[ModelHandle] = None

    @property
    def graph_model(self) -> ModelHandle:
        return self.graph if self.graph is not None else self.forward


@dataclass
class ForwardTrace:
    sample_id: str
    prompt: OrganizedPrompt
    scg_text: str
    p_sys: str
    p_cau: Optional[str]
    guidance: Optional[Guidance] = None
    guidance_request: Optional[str] = None
    guidance_response: Optional[str] = None
    prediction_request: str = ""
    prediction_response: str = ""
    label: Optional[str] = None
    single_model: bool = False
    loss: object = None
    calls: int = 0

    def participated(self, name: str) -> bool:
        if name == "system_prompt":
            return True
        if name == "causal_system_prompt":
            return self.guidance is not None
        if name == "scg":
            return self.guidance is not None or self.single_model
        return False


def _require_deterministic(model: ModelHandle) -> None:
    if model.spec.temperature != 0:
        raise PreconditionError(f"{model.spec.model}: decoding temperature must be 0, got {model.spec.temperature}")


def relations_block(g: Scg) -> str:
    return f"<Causal Relations>\n{render_scg(g)}\n</Causal Relations>"


def guidance_hash(x: OrganizedPrompt, g: Scg, p_cau: str, model: ModelHandle) -> str:
    payload = json.dumps([x.text, render_scg(g), p_cau, model.spec.model,
                          model.spec.temperature, model.spec.max_tokens])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def extract_envelope(text: str) -> Optional[str]:
    m = _ENVELOPE.search(text)
    if m is None:
        return None
    return f"{ENVELOPE_OPEN}\n{m.group(1).strip()}\n{ENVELOPE_CLOSE}"


def guidance_messages(x: OrganizedPrompt, g: Scg, p_cau: str, constraint: str) -> list[tuple[str, str]]:
    return [
        ("system", f"{p_cau}\n\n{constraint}"),
        ("user", f"{relations_block(g)}\n\n{x.text}"),
    ]


def generate_guidance(x: OrganizedPrompt, g: Scg, p_cau, model: ModelHandle,
                      constraint: str, log=None) -> Guidance:
    _require_deterministic(model)
    messages = guidance_messages(x, g, p_cau.value, constraint)
    response = model.chat(messages, tag=f"guidance::{x.sample_id}", log=log)
    text = extract_envelope(response.content)
    if text is None:
        messages += [("assistant", response.content), ("user", f"{REASK}\n\n{constraint}")]
        response = model.chat(messages, tag=f"guidance::{x.sample_id}::reask", log=log)
        text = extract_envelope(response.content)
        if text is None:
            raise EnvelopeError(f"sample {x.sample_id}: guidance missing its envelope after one re-ask")
    return Guidance(text, guidance_hash(x, g, p_cau.value, model))


def prediction_messages(x: OrganizedPrompt, context: str, p_sys: str, output_format: str) -> list[tuple[str, str]]:
    return [
        ("system", f"{p_sys}\n\n{output_format}"),
        ("user", f"{x.text}\n\n{context}"),
    ]


def predict(x: OrganizedPrompt, z: Optional[Guidance], p_sys, model: ModelHandle, task: TaskSpec,
            log=None, inline_scg: Optional[Scg] = None) -> Prediction:
    """Predict a label from the case plus guidance (or, single-model, the raw graph)."""
    _require_deterministic(model)
    if inline_scg is not None:
        context = relations_block(inline_scg)
    elif z is not None:
        context = z.text
    else:
        raise PreconditionError("predict needs guidance or an inline graph")
    messages = prediction_messages(x, context, p_sys.value, task.output_format)
    response = model.chat(messages, tag=f"predict::{x.sample_id}", log=log)
    return Prediction(response.content, parse_label(response.content, task.labels))


def parse_label(raw: str, labels: Sequence[str]) -> Optional[str]:
    """Extract a ``<label>`` token; None when nothing in ``labels`` is found.

    The last non-empty line is tried first, then the last matching token
    anywhere in the response.  Matching ignores case and extra whitespace.
    """
    if not isinstance(raw, str):
        raw = "" if raw is None else str(raw)
    lookup = {normalize_label(label): label for label in labels}
    lines = [line for line in raw.splitlines() if line.strip()]
    candidates = [_TOKEN.findall(lines[-1])] if lines else []
    candidates.append(_TOKEN.findall(raw))
    for tokens in candidates:
        for tok in reversed(tokens):
            hit = lookup.get(normalize_label(tok))
            if hit is not None:
                return hit
    return None


def forward(x: OrganizedPrompt, g: Scg, p_sys, p_cau, models: Models, task: TaskSpec,
            single_model: bool = False, log=None) -> ForwardTrace:
    scg_text = render_scg(g)
    counter = _CountingLog(log)
    trace = ForwardTrace(x.sample_id, x, scg_text, p_sys.value,
                         None if single_model else p_cau.value, single_model=single_model)
    if single_model:
        prediction = predict(x, None, p_sys, models.forward, task, counter, inline_scg=g)
        trace.prediction_request = prediction_messages(x, relations_block(g), p_sys.value, task.output_format)[1][1]
    else:
        z = generate_guidance(x, g, p_cau, models.graph_model, task.guidance_constraint, counter)
        trace.guidance = z
        trace.guidance_request = guidance_messages(x, g, p_cau.value, task.guidance_constraint)[1][1]
        trace.guidance_response = z.text
        prediction = predict(x, z, p_sys, models.forward, task, counter)
        trace.prediction_request = prediction_messages(x, z.text, p_sys.value, task.output_format)[1][1]
    trace.prediction_response = prediction.raw
    trace.label = prediction.label
    trace.calls = counter.calls
    return trace


@dataclass
class _CountingLog:
    """Pass-through log wrapper that counts model calls made by one forward."""

    inner: object
    calls: int = field(default=0)

    def emit(self, event: str, **fields):
        if event == "call":
            self.calls += 1
        if self.inner is not None:
            return self.inner.emit(event, **fields)
