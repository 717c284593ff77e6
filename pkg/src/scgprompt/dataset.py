"""Task definitions, record tables, organized prompts and balanced splits."""

from __future__ import annotations

import csv
import json
import logging
import math
import random
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import yaml

from .errors import ConfigError, InsufficientData, MissingField, ScgError
from .scg import Scg, normalize_node, parse_scg

log = logging.getLogger(__name__)

TASK_SCHEMA_VERSION = 1

DEFAULT_GUIDANCE_CONSTRAINT = """Format
<Causal Description>
Provide a numbered list of causal statements grounded in the supplied causal relations and case details. Each statement must explicitly articulate the causal mechanism whenever it is available.
</Causal Description>"""


def normalize_label(label: str) -> str:
    return " ".join(str(label).lower().split())


@dataclass(frozen=True)
class Block:
    name: str
    template: str

    @property
    def fields(self) -> list[str]:
        return [f for _, f, _, _ in string.Formatter().parse(self.template) if f]


@dataclass(frozen=True)
class TaskSpec:
    name: str
    labels: tuple[str, ...]
    blocks: tuple[Block, ...]
    candidates: tuple[str, ...]
    description_tag: str
    system_prompt: str
    causal_system_prompt: str
    output_format: str
    initial_scg: str = ""
    outcome_node: Optional[str] = None
    guidance_constraint: str = DEFAULT_GUIDANCE_CONSTRAINT
    id_column: str = "id"
    label_column: str = "label"
    missing_marker: str = "nan"
    data: Optional[str] = None
    scripted_responder: Optional[str] = None

    @property
    def block_names(self) -> list[str]:
        return [b.name for b in self.blocks]

    @property
    def fields(self) -> list[str]:
        return [f for b in self.blocks for f in b.fields]

    @property
    def scg_vocabulary(self) -> frozenset[str]:
        """Nodes an SCG may mention: the candidate blocks plus the outcome."""
        vocab = set(self.candidates)
        if self.outcome_node:
            vocab.add(self.outcome_node)
        return frozenset(vocab)

    def initial_graph(self) -> Scg:
        return parse_scg(self.initial_scg, self.scg_vocabulary)

    def match_label(self, value: str) -> Optional[str]:
        norm = normalize_label(value)
        for label in self.labels:
            if normalize_label(label) == norm:
                return label
        return None

    def to_dict(self) -> dict:
        return {
            "version": TASK_SCHEMA_VERSION,
            "name": self.name,
            "labels": list(self.labels),
            "description_tag": self.description_tag,
            "outcome_node": self.outcome_node,
            "blocks": [{"name": b.name, "template": b.template} for b in self.blocks],
            "candidates": list(self.candidates),
            "initial_scg": self.initial_scg,
            "system_prompt": self.system_prompt,
            "causal_system_prompt": self.causal_system_prompt,
            "output_format": self.output_format,
            "guidance_constraint": self.guidance_constraint,
            "id_column": self.id_column,
            "label_column": self.label_column,
            "missing_marker": self.missing_marker,
            "data": self.data,
            "scripted_responder": self.scripted_responder,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TaskSpec":
        problems: list[str] = []

        def need(key: str, kind=str) -> Any:
            if key not in doc or doc[key] is None:
                problems.append(f"{key}: missing")
                return kind()
            if not isinstance(doc[key], kind):
                problems.append(f"{key}: expected {kind.__name__}, got {type(doc[key]).__name__}")
                return kind()
            return doc[key]

        version = doc.get("version", TASK_SCHEMA_VERSION)
        if version != TASK_SCHEMA_VERSION:
            problems.append(f"version: unsupported schema version {version!r}")
        name = need("name")
        labels = [str(x) for x in need("labels", list)]
        blocks = []
        for i, b in enumerate(need("blocks", list)):
            if not isinstance(b, dict) or "name" not in b or "template" not in b:
                problems.append(f"blocks[{i}]: needs 'name' and 'template'")
                continue
            try:
                blocks.append(Block(normalize_node(str(b["name"])), str(b["template"])))
            except ScgError as exc:
                problems.append(f"blocks[{i}].name: {exc}")
        candidates = doc.get("candidates")
        if candidates is None:
            candidates = [b.name for b in blocks]
        candidates = [str(c).strip() for c in candidates]

        if not labels:
            problems.append("labels: must be non-empty")
        norm = [normalize_label(x) for x in labels]
        for i, a in enumerate(norm):
            for j, b in enumerate(norm):
                if i < j and a == b:
                    problems.append(f"labels: {labels[i]!r} and {labels[j]!r} are duplicates after normalization")
                elif i != j and a != b and a in b:
                    problems.append(f"labels: {labels[i]!r} is a substring of {labels[j]!r}")
        block_names = [b.name for b in blocks]
        if len(set(block_names)) != len(block_names):
            problems.append("blocks: duplicate block names")
        for c in candidates:
            if c not in block_names:
                problems.append(f"candidates: [{c}] is not a block name in the template")
        for b in block_names:
            if b not in candidates:
                problems.append(f"blocks: template block [{b}] is missing from candidates")

        spec = None
        if not problems:
            spec = cls(
                name=name,
                labels=tuple(labels),
                blocks=tuple(blocks),
                candidates=tuple(candidates),
                description_tag=need("description_tag"),
                system_prompt=need("system_prompt"),
                causal_system_prompt=need("causal_system_prompt"),
                output_format=need("output_format"),
                initial_scg=doc.get("initial_scg") or "",
                outcome_node=doc.get("outcome_node"),
                guidance_constraint=doc.get("guidance_constraint") or DEFAULT_GUIDANCE_CONSTRAINT,
                id_column=doc.get("id_column", "id"),
                label_column=doc.get("label_column", "label"),
                missing_marker=str(doc.get("missing_marker", "nan")),
                data=doc.get("data"),
                scripted_responder=doc.get("scripted_responder"),
            )
            if spec.outcome_node is not None and spec.outcome_node in block_names:
                problems.append("outcome_node: must not also be an input block")
            try:
                spec.initial_graph()
            except ScgError as exc:
                problems.append(f"initial_scg: {exc}")
        if problems:
            raise ConfigError("invalid task config:\n  " + "\n  ".join(problems))
        return spec


@dataclass
class RecordTable:
    """Rows of field -> value strings keyed by sample id, with gold labels."""

    labels: tuple[str, ...]
    rows: dict[str, dict[str, str]] = field(default_factory=dict)
    golds: dict[str, str] = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return list(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def label_counts(self, ids: Optional[Iterable[str]] = None) -> dict[str, int]:
        counts = {label: 0 for label in self.labels}
        for sid in (self.rows if ids is None else ids):
            counts[self.golds[sid]] += 1
        return counts


@dataclass(frozen=True)
class OrganizedPrompt:
    sample_id: str
    text: str
    gold: str


def render_prompt(spec: TaskSpec, row: dict[str, Any], sample_id: Optional[str] = None) -> OrganizedPrompt:
    """Fill every block's template from ``row`` and wrap it in the task delimiters.

    Values are inserted verbatim; empty values become ``spec.missing_marker``.
    """
    sid = sample_id if sample_id is not None else str(row.get(spec.id_column, ""))
    lines = [f"<{spec.description_tag}>"]
    for block in spec.blocks:
        values = {}
        for f in block.fields:
            if f not in row:
                raise MissingField(f"sample {sid!r}: field {f!r} for block [{block.name}] is absent")
            v = row[f]
            v = "" if v is None else str(v)
            values[f] = v if v.strip() else spec.missing_marker
        lines.append(f"[{block.name}] " + block.template.format_map(values))
    lines.append(f"</{spec.description_tag}>")
    gold = row.get(spec.label_column, "")
    return OrganizedPrompt(sid, "\n".join(lines), str(gold))


def _read_rows(path: Path) -> list[dict[str, str]]:
    if path.suffix in (".jsonl", ".ndjson"):
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        return [{k: ("" if v is None else str(v)) for k, v in r.items()} for r in rows]
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_records(spec: TaskSpec, path: Union[str, Path]) -> RecordTable:
    path = Path(path)
    rows = _read_rows(path)
    problems = []
    table = RecordTable(spec.labels)
    needed = set(spec.fields) | {spec.id_column, spec.label_column}
    for n, row in enumerate(rows, start=1):
        missing = sorted(needed - set(row))
        if missing:
            problems.append(f"{path.name} row {n}: missing columns {missing}")
            continue
        sid = str(row[spec.id_column])
        if sid in table.rows:
            problems.append(f"{path.name} row {n}: duplicate id {sid!r}")
            continue
        label = spec.match_label(row[spec.label_column])
        if label is None:
            problems.append(f"{path.name} row {n}: label {row[spec.label_column]!r} not in {list(spec.labels)}")
            continue
        table.rows[sid] = {k: v for k, v in row.items()}
        table.golds[sid] = label
    if problems:
        raise ConfigError("invalid records:\n  " + "\n  ".join(problems[:20]))
    return table


def load_task(path: Union[str, Path]) -> tuple[TaskSpec, RecordTable]:
    """Load ``task.yaml`` (or a directory containing it) and its data file."""
    path = Path(path)
    if path.is_dir():
        path = path / "task.yaml"
    if not path.exists():
        raise ConfigError(f"task config not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    spec = TaskSpec.from_dict(doc)
    if not spec.data:
        raise ConfigError("data: missing")
    data_path = (path.parent / spec.data).resolve()
    if not data_path.exists():
        raise ConfigError(f"data: file not found: {data_path}")
    return spec, load_records(spec, data_path)


def save_task(spec: TaskSpec, table: RecordTable, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = spec.to_dict()
    doc["data"] = "data.csv"
    columns = [spec.id_column] + list(dict.fromkeys(spec.fields)) + [spec.label_column]
    with open(directory / "data.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for sid, row in table.rows.items():
            writer.writerow({**row, spec.id_column: sid, spec.label_column: table.golds[sid]})
    with open(directory / "task.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False, allow_unicode=True, width=100)
    return directory / "task.yaml"


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    balance: dict = field(default_factory=dict)
    proportional: bool = False

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "seed": self.seed, "balance": self.balance, "proportional": self.proportional}

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), d["seed"],
                   d.get("balance", {}), d.get("proportional", False))


def equal_quotas(n: int, counts: dict[str, int]) -> dict[str, int]:
    """Split ``n`` as evenly as possible; the remainder goes to the largest classes."""
    labels = list(counts)
    base, rem = divmod(n, len(labels))
    quotas = {label: base for label in labels}
    by_size = sorted(labels, key=lambda lb: (-counts[lb], labels.index(lb)))
    for label in by_size[:rem]:
        quotas[label] += 1
    return quotas


def proportional_quotas(n: int, counts: dict[str, int]) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` proportional to ``counts``."""
    total = sum(counts.values())
    raw = {k: n * v / total for k, v in counts.items()}
    quotas = {k: min(counts[k], math.floor(r)) for k, r in raw.items()}
    labels = list(counts)
    order = sorted(labels, key=lambda k: (-(raw[k] - math.floor(raw[k])), -counts[k], labels.index(k)))
    short = n - sum(quotas.values())
    while short > 0:
        progressed = False
        for k in order:
            if short and quotas[k] < counts[k]:
                quotas[k] += 1
                short -= 1
                progressed = True
        if not progressed:
            raise InsufficientData(f"cannot draw {n} samples from {counts}")
    return quotas


def balanced_split(table: RecordTable, val_n: int = 100, test_n: int = 100, seed: int = 0) -> Split:
    counts = table.label_counts()
    labels = list(table.labels)
    if len(table) < val_n + test_n:
        raise InsufficientData(f"{len(table)} records cannot supply val={val_n} + test={test_n}")
    need = math.ceil(val_n / len(labels)) + math.ceil(test_n / len(labels))
    proportional = any(counts[lb] < need for lb in labels)
    if not proportional:
        val_q = equal_quotas(val_n, counts)
        test_q = equal_quotas(test_n, {lb: counts[lb] - val_q[lb] for lb in labels})
    else:
        log.warning("labels too small for equal-per-label quotas (need %d each, have %s); "
                    "falling back to proportional split", need, counts)
        val_q = proportional_quotas(val_n, counts)
        test_q = proportional_quotas(test_n, {lb: counts[lb] - val_q[lb] for lb in labels})

    rng = random.Random(seed)
    position = {sid: i for i, sid in enumerate(table.ids)}
    val, test = [], []
    for label in labels:
        ids = [sid for sid in table.ids if table.golds[sid] == label]
        rng.shuffle(ids)
        val.extend(ids[:val_q[label]])
        test.extend(ids[val_q[label]:val_q[label] + test_q[label]])
    val.sort(key=position.get)
    test.sort(key=position.get)
    held = set(val) | set(test)
    train = [sid for sid in table.ids if sid not in held]
    balance = {"val": table.label_counts(val), "test": table.label_counts(test),
               "train": table.label_counts(train)}
    return Split(tuple(train), tuple(val), tuple(test), seed, balance, proportional)
