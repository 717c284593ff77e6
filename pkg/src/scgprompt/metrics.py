"""Accuracy, support-weighted F1 and confusion matrices.

A prediction of ``None`` stands for a parse failure.  It matches no class:
it costs its gold class recall and never adds a false positive anywhere.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from .errors import LengthMismatch

PARSE_FAILURE_COLUMN = "<parse failure>"

Pred = Optional[str]


def _check(preds: Sequence[Pred], golds: Sequence[str]) -> None:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} gold labels")
    if not golds:
        raise LengthMismatch("metrics need at least one sample")


def confusion_matrix(preds: Sequence[Pred], golds: Sequence[str], labels: Sequence[str]) -> list[list[int]]:
    """Rows are gold labels, columns are ``labels`` followed by the parse-failure column."""
    _check(preds, golds)
    col = {label: i for i, label in enumerate(labels)}
    matrix = [[0] * (len(labels) + 1) for _ in labels]
    for p, g in zip(preds, golds):
        if g not in col:
            raise ValueError(f"gold label {g!r} not in label set")
        if p is not None and p not in col:
            raise ValueError(f"predicted label {p!r} not in label set")
        matrix[col[g]][len(labels) if p is None else col[p]] += 1
    return matrix


def accuracy(preds: Sequence[Pred], golds: Sequence[str]) -> float:
    _check(preds, golds)
    return sum(p is not None and p == g for p, g in zip(preds, golds)) / len(golds)


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


def per_class(preds: Sequence[Pred], golds: Sequence[str], labels: Sequence[str]) -> dict[str, ClassScore]:
    m = confusion_matrix(preds, golds, labels)
    out = {}
    for i, label in enumerate(labels):
        tp = m[i][i]
        support = sum(m[i])
        predicted = sum(m[r][i] for r in range(len(labels)))
        p = tp / predicted if predicted else 0.0
        r = tp / support if support else 0.0
        # same as 2pr/(p+r), but exact on small counts
        f1 = 2 * tp / (support + predicted) if tp else 0.0
        out[label] = ClassScore(p, r, f1, support)
    return out


def weighted_f1(preds: Sequence[Pred], golds: Sequence[str], labels: Sequence[str]) -> float:
    scores = per_class(preds, golds, labels)
    return math.fsum(s.support * s.f1 for s in scores.values()) / len(golds)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    weighted_f1: float
    per_class: dict[str, ClassScore]
    confusion: list[list[int]]
    labels: tuple[str, ...]
    total: int
    parse_failures: int

    @property
    def parse_failure_rate(self) -> float:
        return self.parse_failures / self.total

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "parse_failure_rate": self.parse_failure_rate,
            "parse_failures": self.parse_failures,
            "total": self.total,
            "labels": list(self.labels),
            "confusion": self.confusion,
            "per_class": {k: vars(v) for k, v in self.per_class.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(
            accuracy=d["accuracy"], weighted_f1=d["weighted_f1"],
            per_class={k: ClassScore(**v) for k, v in d["per_class"].items()},
            confusion=[list(r) for r in d["confusion"]], labels=tuple(d["labels"]),
            total=d["total"], parse_failures=d["parse_failures"],
        )


def compute_metrics(preds: Sequence[Pred], golds: Sequence[str], labels: Sequence[str]) -> Metrics:
    scores = per_class(preds, golds, labels)
    return Metrics(
        accuracy=accuracy(preds, golds),
        weighted_f1=math.fsum(s.support * s.f1 for s in scores.values()) / len(golds),
        per_class=scores,
        confusion=confusion_matrix(preds, golds, labels),
        labels=tuple(labels),
        total=len(golds),
        parse_failures=sum(p is None for p in preds),
    )


# -- comparison tables --------------------------------------------------------

TABLE_COLUMNS = ("setting", "val_acc", "val_f1", "test_acc", "test_f1", "parse_fail")


def table_rows(results: dict[str, dict]) -> list[dict]:
    """``results`` maps a setting name to ``{"val": Metrics, "test": Metrics | None}``."""
    rows = []
    for name, res in results.items():
        val, test = res.get("val"), res.get("test")
        rows.append({
            "setting": name,
            "val_acc": f"{val.accuracy:.3f}" if val else "",
            "val_f1": f"{val.weighted_f1:.3f}" if val else "",
            "test_acc": f"{test.accuracy:.3f}" if test else "",
            "test_f1": f"{test.weighted_f1:.3f}" if test else "",
            "parse_fail": f"{(test or val).parse_failure_rate:.3f}" if (test or val) else "",
        })
    return rows


def format_table(results: dict[str, dict]) -> str:
    rows = [dict(zip(TABLE_COLUMNS, TABLE_COLUMNS))] + table_rows(results)
    widths = {c: max(len(r[c]) for r in rows) for c in TABLE_COLUMNS}
    lines = ["  ".join(r[c].ljust(widths[c]) for c in TABLE_COLUMNS).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * widths[c] for c in TABLE_COLUMNS))
    return "\n".join(lines)


def write_csv(path: Union[str, Path], results: dict[str, dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        writer.writerows(table_rows(results))
