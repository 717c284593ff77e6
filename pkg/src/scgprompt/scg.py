"""Semantic causal graphs: data model, text format, edits, diffs and variants.

A graph is an ordered list of causal statements over a fixed vocabulary of
node labels.  Each statement links one or more source nodes to one or more
target nodes and carries a free-text description of the mechanism.  The
induced edge set (the cartesian product of sources and targets over all
statements) must be acyclic.

Canonical text form::

    Causal Statement 1: [Person Status] affects [Severity].
    The driver's Blood Alcohol Content (BAC) significantly increases ...

    Causal Statement 2: [Position] and [Driver Behavior] affects [Severity].
    ...
"""

from __future__ import annotations

import enum
import graphlib
import math
import random
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .errors import CycleError, ScgSyntaxError, UnknownNode

__all__ = [
    "CausalStatement",
    "Scg",
    "EditKind",
    "ScgEdit",
    "ScgDiff",
    "normalize_node",
    "parse_scg",
    "render_scg",
    "apply_edit",
    "diff_scg",
    "apply_diff",
    "edge_changes",
    "reverse_scg",
    "subsample_scg",
    "retained_edges",
]

Edge = tuple[str, str]


def normalize_node(label: str) -> str:
    label = label.strip()
    if not label:
        raise ScgSyntaxError("empty node label")
    if any(c in label for c in "[]\n\r"):
        raise ScgSyntaxError(f"node label may not contain brackets or newlines: {label!r}")
    return label


def _normalize_description(text: str) -> str:
    lines = [line.strip() for line in text.strip().splitlines()]
    return "\n".join(line for line in lines if line)


def _unique(labels: Iterable[str]) -> tuple[str, ...]:
    out: list[str] = []
    for label in labels:
        label = normalize_node(label)
        if label not in out:
            out.append(label)
    return tuple(out)


@dataclass(frozen=True)
class CausalStatement:
    sources: tuple[str, ...]
    targets: tuple[str, ...]
    description: str
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sources", _unique(self.sources))
        object.__setattr__(self, "targets", _unique(self.targets))
        object.__setattr__(self, "description", _normalize_description(self.description))
        if not self.sources or not self.targets:
            raise ScgSyntaxError("a statement needs at least one source and one target")
        if not self.description:
            raise ScgSyntaxError(f"statement {self.header_text()!r} has no description")
        if set(self.sources) & set(self.targets):
            loop = sorted(set(self.sources) & set(self.targets))
            raise CycleError(f"self-loop on {loop}")

    @property
    def edges(self) -> tuple[Edge, ...]:
        return tuple((s, t) for s in self.sources for t in self.targets)

    @property
    def key(self) -> tuple[frozenset[str], frozenset[str]]:
        return frozenset(self.sources), frozenset(self.targets)

    def content(self) -> tuple:
        """Everything except the display index."""
        return self.sources, self.targets, self.description

    def header_text(self) -> str:
        lhs = " and ".join(f"[{s}]" for s in self.sources)
        rhs = " and ".join(f"[{t}]" for t in self.targets)
        return f"{lhs} affects {rhs}."

    def with_index(self, index: int) -> "CausalStatement":
        return CausalStatement(self.sources, self.targets, self.description, index)


def _check_acyclic(statements: Sequence[CausalStatement]) -> None:
    sorter = graphlib.TopologicalSorter()
    for st in statements:
        for s, t in st.edges:
            if s == t:
                raise CycleError(f"self-loop on [{s}]")
            sorter.add(t, s)
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        cycle = exc.args[1] if len(exc.args) > 1 else []
        raise CycleError("induced graph has a cycle: " + " -> ".join(f"[{n}]" for n in cycle)) from None


@dataclass(frozen=True)
class Scg:
    """Immutable semantic causal graph.

    Construction re-indexes statements 1..n and validates the vocabulary and
    acyclicity, so every ``Scg`` value in circulation satisfies the invariants.
    """

    statements: tuple[CausalStatement, ...] = ()
    candidates: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "candidates", frozenset(normalize_node(c) for c in self.candidates))
        stmts = tuple(st.with_index(i) for i, st in enumerate(self.statements, start=1))
        object.__setattr__(self, "statements", stmts)
        for st in stmts:
            unknown = [n for n in st.sources + st.targets if n not in self.candidates]
            if unknown:
                raise UnknownNode(
                    f"statement {st.index} references nodes outside the candidate set: "
                    + ", ".join(f"[{n}]" for n in unknown)
                )
        _check_acyclic(stmts)

    def __len__(self) -> int:
        return len(self.statements)

    @property
    def edges(self) -> list[Edge]:
        """Distinct induced edges in first-appearance order."""
        seen: dict[Edge, None] = {}
        for st in self.statements:
            for e in st.edges:
                seen.setdefault(e, None)
        return list(seen)

    @property
    def nodes(self) -> set[str]:
        return {n for st in self.statements for n in st.sources + st.targets}

    def topological_order(self) -> list[str]:
        sorter = graphlib.TopologicalSorter()
        for s, t in self.edges:
            sorter.add(t, s)
        return list(sorter.static_order())

    def replace(self, statements: Iterable[CausalStatement]) -> "Scg":
        return Scg(tuple(statements), self.candidates)


# -- text format -------------------------------------------------------------

_BRACKET = re.compile(r"\[([^\[\]\n]*)\]")
_CANONICAL_PREFIX = re.compile(r"^\s*causal\s+statement\s+(\d+)\s*[:.]\s*", re.IGNORECASE)
_LOOSE_PREFIX = re.compile(r"^\s*(?:\d+\s*[.):]|[-*•])\s*")
_SEPARATOR = re.compile(r"^\s*(?:,\s*and|,|and|&)\s*$", re.IGNORECASE)
_VERB = re.compile(
    r"^\s*(?:affects?|determines?|influences?|causes?|leads?\s+to)\s*$", re.IGNORECASE
)
_TRAILER = re.compile(r"^\s*\.?\s*$")


def _parse_header(body: str) -> Optional[tuple[list[str], list[str]]]:
    """Split ``[A] and [B] affects [C]`` into node lists; None if not a header."""
    body = body.replace("**", "").strip()
    matches = list(_BRACKET.finditer(body))
    if len(matches) < 2 or matches[0].start() != 0:
        return None
    if not _TRAILER.match(body[matches[-1].end():]):
        return None
    sides: list[list[str]] = [[matches[0].group(1)]]
    for prev, cur in zip(matches, matches[1:]):
        gap = body[prev.end():cur.start()]
        if _SEPARATOR.match(gap):
            sides[-1].append(cur.group(1))
        elif _VERB.match(gap) and len(sides) == 1:
            sides.append([cur.group(1)])
        else:
            return None
    if len(sides) != 2:
        return None
    return sides[0], sides[1]


def parse_scg(text: str, candidates: Optional[Iterable[str]] = None) -> Scg:
    """Parse causal statements from text.

    Accepts the canonical ``Causal Statement k:`` form as well as numbered or
    bulleted lists and bare ``[A] affects [B]`` lines.  When any canonical
    header is present, only canonical headers start new statements.  With
    ``candidates=None`` the vocabulary is taken from the referenced nodes.
    """
    lines = text.splitlines()
    strict = any(_CANONICAL_PREFIX.match(line) for line in lines)
    blocks: list[tuple[list[str], list[str], list[str], int]] = []
    current: Optional[tuple[list[str], list[str], list[str], int]] = None

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            current = None if current is None or current[2] else current
            continue
        m = _CANONICAL_PREFIX.match(line)
        header = None
        if m:
            header = _parse_header(line[m.end():])
            if header is None:
                raise ScgSyntaxError(f"line {lineno}: malformed causal statement: {line!r}")
        elif not strict and (current is None or current[2]):
            header = _parse_header(_LOOSE_PREFIX.sub("", line, count=1))
        if header is not None:
            current = (header[0], header[1], [], lineno)
            blocks.append(current)
        elif current is None:
            raise ScgSyntaxError(f"line {lineno}: text outside any causal statement: {line!r}")
        else:
            current[2].append(line)

    statements = []
    for sources, targets, desc, lineno in blocks:
        if not desc:
            raise ScgSyntaxError(f"line {lineno}: causal statement has no description")
        statements.append(CausalStatement(tuple(sources), tuple(targets), "\n".join(desc)))
    if candidates is None:
        vocab = {n for st in statements for n in st.sources + st.targets}
    else:
        vocab = set(candidates)
    return Scg(tuple(statements), frozenset(vocab))


def render_scg(g: Scg) -> str:
    blocks = [
        f"Causal Statement {st.index}: {st.header_text()}\n{st.description}" for st in g.statements
    ]
    return "\n\n".join(blocks)


# -- edits -------------------------------------------------------------------


class EditKind(enum.Enum):
    ADD = "add"
    DELETE = "delete"
    EDIT = "edit"


@dataclass(frozen=True)
class ScgEdit:
    kind: EditKind
    statement: Optional[CausalStatement] = None
    index: Optional[int] = None
    sources: Optional[tuple[str, ...]] = None
    targets: Optional[tuple[str, ...]] = None
    description: Optional[str] = None

    def __post_init__(self):
        if self.kind is EditKind.ADD:
            ok = self.statement is not None and self.index is None
        elif self.kind is EditKind.DELETE:
            ok = self.index is not None and self.statement is None
        else:
            ok = self.index is not None and self.statement is None and (
                self.sources is not None or self.targets is not None or self.description is not None
            )
        if not ok:
            raise ValueError(f"payload does not match edit kind {self.kind.value}")

    @classmethod
    def add(cls, sources, targets, description) -> "ScgEdit":
        return cls(EditKind.ADD, statement=CausalStatement(tuple(sources), tuple(targets), description))

    @classmethod
    def delete(cls, index: int) -> "ScgEdit":
        return cls(EditKind.DELETE, index=index)

    @classmethod
    def edit(cls, index: int, sources=None, targets=None, description=None) -> "ScgEdit":
        return cls(
            EditKind.EDIT,
            index=index,
            sources=tuple(sources) if sources is not None else None,
            targets=tuple(targets) if targets is not None else None,
            description=description,
        )


def apply_edit(g: Scg, e: ScgEdit) -> Scg:
    """Return a new graph with ``e`` applied; ``g`` is left untouched."""
    stmts = list(g.statements)
    if e.kind is EditKind.ADD:
        stmts.append(e.statement)
        return g.replace(stmts)
    if not 1 <= e.index <= len(stmts):
        raise IndexError(f"no causal statement {e.index} (graph has {len(stmts)})")
    pos = e.index - 1
    if e.kind is EditKind.DELETE:
        del stmts[pos]
    else:
        old = stmts[pos]
        stmts[pos] = CausalStatement(
            e.sources if e.sources is not None else old.sources,
            e.targets if e.targets is not None else old.targets,
            e.description if e.description is not None else old.description,
        )
    return g.replace(stmts)


# -- diffs -------------------------------------------------------------------


@dataclass(frozen=True)
class ScgDiff:
    added: tuple[CausalStatement, ...] = ()
    removed: tuple[CausalStatement, ...] = ()
    modified: tuple[tuple[CausalStatement, CausalStatement], ...] = ()

    def __bool__(self) -> bool:
        return bool(self.added or self.removed or self.modified)

    def render(self) -> str:
        """Plain-text markers: ``+`` added, ``-`` removed, ``~`` modified."""
        out = []
        for st in self.removed:
            out.append(f"- {st.header_text()}")
        for before, after in self.modified:
            out.append(f"~ {before.header_text()}  =>  {after.header_text()}")
            if before.description != after.description:
                out.extend("    - " + line for line in before.description.splitlines())
                out.extend("    + " + line for line in after.description.splitlines())
        for st in self.added:
            out.append(f"+ {st.header_text()}")
            out.extend("    " + line for line in st.description.splitlines())
        return "\n".join(out)


def diff_scg(old: Scg, new: Scg) -> ScgDiff:
    """Match statements by their (sources, targets) key, then by index."""
    unmatched_old = list(old.statements)
    unmatched_new = []
    modified = []
    for st in new.statements:
        hit = next((o for o in unmatched_old if o.key == st.key), None)
        if hit is None:
            unmatched_new.append(st)
            continue
        unmatched_old.remove(hit)
        if hit.content() != st.content():
            modified.append((hit, st))
    added = []
    for st in unmatched_new:
        hit = next((o for o in unmatched_old if o.index == st.index), None)
        if hit is None:
            added.append(st)
        else:
            unmatched_old.remove(hit)
            modified.append((hit, st))
    modified.sort(key=lambda pair: pair[1].index)
    return ScgDiff(tuple(added), tuple(unmatched_old), tuple(modified))


def apply_diff(old: Scg, diff: ScgDiff, candidates: Optional[Iterable[str]] = None) -> Scg:
    removed = {st.index for st in diff.removed}
    swaps = {before.index: after for before, after in diff.modified}
    stmts = []
    for st in old.statements:
        if st.index in removed:
            continue
        stmts.append(swaps.get(st.index, st))
    stmts.extend(diff.added)
    vocab = old.candidates if candidates is None else frozenset(candidates)
    return Scg(tuple(stmts), vocab)


def edge_changes(old: Scg, new: Scg) -> tuple[list[Edge], list[Edge]]:
    """Edge-level view of a diff: (added edges, removed edges)."""
    old_edges, new_edges = old.edges, new.edges
    added = [e for e in new_edges if e not in set(old_edges)]
    removed = [e for e in old_edges if e not in set(new_edges)]
    return added, removed


# -- completeness variants ---------------------------------------------------


def reverse_scg(g: Scg) -> Scg:
    return g.replace(CausalStatement(st.targets, st.sources, st.description) for st in g.statements)


def retained_edges(g: Scg, fraction: float, seed: int) -> list[Edge]:
    """Edges kept by :func:`subsample_scg`, in graph order.

    One seeded permutation of the edge list is drawn and the first
    ``ceil(fraction * n)`` entries are kept, so smaller fractions are nested
    inside larger ones for the same seed.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    edges = g.edges
    order = list(range(len(edges)))
    random.Random(seed).shuffle(order)
    # rounding guards against 0.33 * 100 = 33.000000000000004
    keep = math.ceil(round(fraction * len(edges), 9))
    chosen = set(order[:keep])
    return [e for i, e in enumerate(edges) if i in chosen]


def subsample_scg(g: Scg, fraction: float, seed: int) -> Scg:
    kept = set(retained_edges(g, fraction, seed))
    stmts: list[CausalStatement] = []
    for st in g.statements:
        edges = [e for e in st.edges if e in kept]
        if not edges:
            continue
        if len(edges) == len(st.edges):
            stmts.append(st)
            continue
        srcs = _unique(s for s, _ in edges)
        tgts = _unique(t for _, t in edges)
        if len(srcs) * len(tgts) == len(edges):
            stmts.append(CausalStatement(srcs, tgts, st.description))
            continue
        # not a full product any more: one statement per surviving source
        for s in srcs:
            stmts.append(CausalStatement((s,), tuple(t for ss, t in edges if ss == s), st.description))
    return g.replace(stmts)
