"""Scripted scenarios for offline runs of the full optimisation loop.

The planted-edge task is a three-label problem in which the prediction
model answers correctly only when the graph contains one specific causal
statement.  The scripted backward engine proposes a distractor, then a
cyclic graph, then the planted statement, so a run exercises rejection,
the repair path and acceptance in a fixed order.

The gating scenario drives candidate quality with markers embedded in the
prompts, so the validation score of every candidate is known in advance.
"""

from __future__ import annotations

import random
import re
from decimal import Decimal
from typing import Callable, Optional, Sequence

from .dataset import Block, RecordTable, Split, TaskSpec, balanced_split
from .errors import ScgError
from .llm import ChatRequest, ModelHandle, ModelSpec, Role, ScriptedBackend
from .pipeline import Models
from .scg import parse_scg, render_scg
from .textgrad import CURRENT_VALUE, IMPROVED_CLOSE, IMPROVED_OPEN, NO_CHANGE

PLANTED_LABELS = ("Low", "Medium", "High")
PLANTED_OUTCOME = "Outcome Level"
PLANTED_SOURCE = "Sensor Reading"
PLANTED_HEADER = f"[{PLANTED_SOURCE}] affects [{PLANTED_OUTCOME}]"
PLANTED_STATEMENT = (f"{PLANTED_HEADER}.\n"
                     "A higher sensor reading directly raises the outcome level.")
DISTRACTOR_STATEMENT = (f"[Ambient Noise] affects [{PLANTED_OUTCOME}].\n"
                        "Loud surroundings are assumed to push the outcome level up.")
CYCLIC_STATEMENT = ("[Ambient Noise] affects [Weather].\n"
                    "Noise is claimed to change the weather.")

PLANTED_INITIAL_SCG = """Causal Statement 1: [Weather] affects [Ambient Noise].
Rain and wind add background noise around the sensor.

Causal Statement 2: [Time of Day] affects [Ambient Noise].
Traffic around rush hours makes the surroundings louder."""

PLANTED_SYSTEM_PROMPT = ("You classify the outcome level of a monitoring site from its case description "
                         "and the reasoning guidance that follows it.")
PLANTED_CAUSAL_PROMPT = ("You turn causal relations between monitoring factors into case-specific "
                         "reasoning guidance.")
PLANTED_OUTPUT_FORMAT = ("Finish with one line holding only the label in angle brackets: "
                         "<Low>, <Medium> or <High>.")

_RELATIONS = re.compile(r"<Causal Relations>\n?(.*?)\n?</Causal Relations>", re.DOTALL)
_SECTION = re.compile(r"^### (.+)$", re.MULTILINE)


def planted_task(n_per_label: int = 30, seed: int = 0) -> tuple[TaskSpec, RecordTable]:
    spec = TaskSpec(
        name="planted",
        labels=PLANTED_LABELS,
        blocks=(
            Block("Sensor Reading", "The sensor reports {reading} units."),
            Block("Ambient Noise", "Background noise is {noise}."),
            Block("Weather", "The weather is {weather}."),
            Block("Time of Day", "The reading was taken at {hour}:00."),
        ),
        candidates=("Sensor Reading", "Ambient Noise", "Weather", "Time of Day"),
        description_tag="Site Description",
        system_prompt=PLANTED_SYSTEM_PROMPT,
        causal_system_prompt=PLANTED_CAUSAL_PROMPT,
        output_format=PLANTED_OUTPUT_FORMAT,
        initial_scg=PLANTED_INITIAL_SCG,
        outcome_node=PLANTED_OUTCOME,
        data="data.csv",
        scripted_responder="scgprompt.scenarios:planted_backend",
    )
    rng = random.Random(seed)
    table = RecordTable(PLANTED_LABELS)
    ranges = {"Low": (0, 30), "Medium": (35, 65), "High": (70, 100)}
    n = 0
    for i in range(n_per_label):
        for label in PLANTED_LABELS:
            n += 1
            lo, hi = ranges[label]
            sid = f"p{n:03d}"
            table.rows[sid] = {
                "id": sid,
                "reading": f"{rng.uniform(lo, hi):.1f}",
                "noise": rng.choice(["low", "moderate", "high"]),
                "weather": rng.choice(["clear", "rainy", "windy"]),
                "hour": str(rng.randrange(24)),
                "label": label,
            }
            table.golds[sid] = label
    return spec, table


def planted_split(table: RecordTable, seed: int = 0) -> Split:
    n = len(table) // 3
    return balanced_split(table, val_n=n, test_n=n, seed=seed)


# -- helpers --------------------------------------------------------------------


def sample_of(request: ChatRequest) -> str:
    parts = request.tag.split("::")
    return parts[1] if len(parts) > 1 else ""


def section(request: ChatRequest, name: str) -> str:
    """Body of one ``### NAME`` section in the last user message."""
    text = request.messages[-1][1]
    heads = list(_SECTION.finditer(text))
    for i, m in enumerate(heads):
        if m.group(1).strip() == name:
            end = heads[i + 1].start() if i + 1 < len(heads) else len(text)
            return text[m.end():end].strip()
    return ""


def improved(value: str) -> str:
    return f"{IMPROVED_OPEN}\n{value}\n{IMPROVED_CLOSE}"


def describe_graph(request: ChatRequest, extra: str = "") -> str:
    """Guidance that restates each relation of the graph in the request."""
    m = _RELATIONS.search(request.content("user"))
    text = m.group(1).strip() if m else ""
    lines = []
    try:
        g = parse_scg(text) if text else None
    except ScgError:
        g = None
    if g is not None:
        lines = [f"{i}. {s.header_text()} {s.description.splitlines()[0] if s.description else ''}".rstrip()
                 for i, s in enumerate(g.statements, 1)]
    if not lines:
        lines = ["1. No causal relations are available for this case."]
    if extra:
        lines.append(extra)
    return "<Causal Description>\n" + "\n".join(lines) + "\n</Causal Description>"


def rank_outcomes(table: RecordTable, ids: Sequence[str], correct_per_class: Callable[[int], int]) -> dict[str, str]:
    """Scripted predictions: the first ``k`` cases of each class are right.

    Wrong cases are shifted to the next label, so every class receives as
    many false positives as it loses, and precision equals recall.
    """
    labels = list(table.labels)
    out = {}
    for i, label in enumerate(labels):
        members = [sid for sid in ids if table.golds[sid] == label]
        k = correct_per_class(len(members))
        for r, sid in enumerate(members):
            out[sid] = label if r < k else labels[(i + 1) % len(labels)]
    return out


def answer(label: str) -> str:
    return f"The case details were weighed against the guidance.\n<{label}>"


def scripted_models(backend, backward_backend=None, forward_model: str = "scripted-forward",
                    backward_model: str = "scripted-backward",
                    price_in: Decimal = Decimal(0), price_out: Decimal = Decimal(0)) -> Models:
    fwd = ModelSpec(Role.FORWARD, forward_model, price_in=price_in, price_out=price_out)
    bwd = ModelSpec(Role.BACKWARD, backward_model, max_tokens=2048, price_in=price_in, price_out=price_out)
    return Models(
        forward=ModelHandle(fwd, backend),
        backward=ModelHandle(bwd, backward_backend or backend),
        graph=ModelHandle(fwd.as_role(Role.GRAPH), backend),
    )


# -- planted-edge scenario ---------------------------------------------------------


class PlantedResponder:
    """Forward and backward behaviour for the planted-edge task."""

    def __init__(self, table: RecordTable, split: Split, base_fraction: float = 0.4):
        self.baseline = {}
        for ids in (split.val, split.test):
            self.baseline.update(rank_outcomes(table, ids, lambda n: round(base_fraction * n)))
        # training cases are never solved without the planted statement, so
        # every step produces feedback
        self.baseline.update(rank_outcomes(table, split.train, lambda n: 0))
        self.golds = dict(table.golds)
        self.graph_proposals = 0

    def __call__(self, request: ChatRequest) -> Optional[str]:
        tag = request.tag
        kind = tag.split("::")[0]
        sid = sample_of(request)
        if kind == "guidance":
            return describe_graph(request)
        if kind == "predict":
            solved = PLANTED_HEADER in request.content("user")
            return answer(self.golds[sid] if solved else self.baseline[sid])
        if kind == "loss-feedback":
            if "matches the ground truth" in section(request, "FEEDBACK ON OUTPUT"):
                return NO_CHANGE
            return "The prediction ignored how the sensor reading maps to the outcome level."
        if tag.startswith("grad::guidance::"):
            return "The guidance never connects the sensor reading to the outcome level."
        if tag.startswith("grad::system_prompt::"):
            return "Ask the model to weigh every block of the description."
        if tag.startswith("grad::causal_system_prompt::"):
            return "Ask for guidance that names the factor most directly tied to the outcome."
        if tag.startswith("grad::scg::"):
            return f"Add a causal statement linking [{PLANTED_SOURCE}] to [{PLANTED_OUTCOME}]."
        if tag == "apply::system_prompt":
            return improved(section(request, CURRENT_VALUE) + " Weigh every block of the description.")
        if tag == "apply::causal_system_prompt":
            return improved(section(request, CURRENT_VALUE) + " Name the factor most directly tied to the outcome.")
        if tag == "apply::scg":
            self.graph_proposals += 1
            current = section(request, CURRENT_VALUE)
            current = "" if current == "(empty)" else current
            add = {1: DISTRACTOR_STATEMENT, 2: CYCLIC_STATEMENT}.get(self.graph_proposals, PLANTED_STATEMENT)
            return improved(_append_statement(current, add))
        if tag == "apply::scg::repair":
            # repeat the invalid proposal so the edit is rejected
            return request.messages[-2][1]
        return None


def _append_statement(current: str, statement: str) -> str:
    n = current.count("Causal Statement ") + 1
    block = f"Causal Statement {n}: {statement}"
    return f"{current}\n\n{block}" if current.strip() else block


def planted_backend(task: TaskSpec, table: RecordTable, split: Split, **kwargs) -> ScriptedBackend:
    return ScriptedBackend(responder=PlantedResponder(table, split), **kwargs)


# -- gating scenario -------------------------------------------------------------

_Q = re.compile(r"\{\{q=(\d+)\}\}")
_C = re.compile(r"\{\{c=([+-]?\d+)\}\}")


def marker_level(request: ChatRequest, base: int = 4) -> int:
    q = _Q.findall(request.content("system"))
    c = _C.findall(request.content("user"))
    level = (int(q[-1]) if q else base) + (int(c[-1]) if c else 0)
    return max(0, min(10, level))


class GatingResponder:
    """Candidate quality comes from ``{{q=N}}`` in the system prompt and
    ``{{c=N}}`` in the causal prompt: N correct cases per ten in each class.

    ``sys_levels`` and ``cau_offsets`` are consumed one per proposal.
    """

    def __init__(self, table: RecordTable, split: Split, sys_levels: Sequence[int],
                 cau_offsets: Sequence[int], base: int = 4):
        self.table = table
        self.split = split
        self.sys_levels = list(sys_levels)
        self.cau_offsets = list(cau_offsets)
        self.base = base
        self.sys_calls = 0
        self.cau_calls = 0
        self.train = set(split.train)
        self._cache: dict[int, dict[str, str]] = {}

    def predictions(self, level: int) -> dict[str, str]:
        if level not in self._cache:
            preds = {}
            for ids in (self.split.val, self.split.test):
                preds.update(rank_outcomes(self.table, ids, lambda n: round(level * n / 10)))
            preds.update(rank_outcomes(self.table, self.split.train, lambda n: 0))
            self._cache[level] = preds
        return self._cache[level]

    def __call__(self, request: ChatRequest) -> Optional[str]:
        tag = request.tag
        kind = tag.split("::")[0]
        if kind == "guidance":
            c = _C.findall(request.content("system"))
            return describe_graph(request, f"Quality note {{{{c={c[-1]}}}}}" if c else "")
        if kind == "predict":
            return answer(self.predictions(marker_level(request, self.base))[sample_of(request)])
        if kind == "loss-feedback":
            return "The prediction is wrong."
        if kind == "grad":
            return "Revise this component."
        if tag == "apply::system_prompt":
            level = self.sys_levels[min(self.sys_calls, len(self.sys_levels) - 1)]
            self.sys_calls += 1
            base = _Q.sub("", section(request, CURRENT_VALUE)).split(" Revision ")[0].strip()
            return improved(f"{base} Revision {self.sys_calls}. {{{{q={level}}}}}")
        if tag == "apply::causal_system_prompt":
            off = self.cau_offsets[min(self.cau_calls, len(self.cau_offsets) - 1)]
            self.cau_calls += 1
            base = _C.sub("", section(request, CURRENT_VALUE)).split(" Revision ")[0].strip()
            return improved(f"{base} Revision {self.cau_calls}. {{{{c={off:+d}}}}}")
        if tag == "apply::scg":
            current = section(request, CURRENT_VALUE)
            return improved("" if current == "(empty)" else current)
        return None


def gating_backend(task: TaskSpec, table: RecordTable, split: Split,
                   sys_levels: Sequence[int] = (5, 5, 3, 7, 7, 6),
                   cau_offsets: Sequence[int] = (0, 1, 0, -2, 1, 1), **kwargs) -> ScriptedBackend:
    return ScriptedBackend(responder=GatingResponder(table, split, sys_levels, cau_offsets), **kwargs)


def expected_gating_trace(sys_levels: Sequence[int], cau_offsets: Sequence[int], steps: int,
                          base: int = 4) -> list[float]:
    """Reference committed-score sequence for the gating scenario (one proposal per stage per step)."""
    q, c = base, 0
    committed = [max(0, min(10, q + c)) / 10]
    for t in range(steps):
        q_new = sys_levels[min(t, len(sys_levels) - 1)]
        if max(0, min(10, q_new + c)) > max(0, min(10, q + c)):
            q = q_new
            committed.append(max(0, min(10, q + c)) / 10)
        c_new = cau_offsets[min(t, len(cau_offsets) - 1)]
        if max(0, min(10, q + c_new)) > max(0, min(10, q + c)):
            c = c_new
            committed.append(max(0, min(10, q + c)) / 10)
    return committed


def render_planted_graph(with_planted: bool) -> str:
    g = parse_scg(PLANTED_INITIAL_SCG)
    text = render_scg(g)
    return _append_statement(text, PLANTED_STATEMENT) if with_planted else text
