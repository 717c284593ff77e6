"""Append-only JSON-lines event log.

Records never carry wall-clock data, so two runs of the same scripted
configuration produce byte-identical logs.  Concurrent work writes into
child buffers which the owner merges back in a fixed order.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Any, Callable, Iterable, Optional


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


class EventLog:
    def __init__(self, path: Optional[Path] = None, context: Optional[dict] = None):
        self.records: list[dict] = []
        self.context: dict[str, Any] = dict(context or {})
        self._listeners: list[Callable[[dict], None]] = []
        self._lock = threading.Lock()
        self._fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", encoding="utf-8")

    def subscribe(self, fn: Callable[[dict], None]) -> None:
        self._listeners.append(fn)

    def emit(self, event: str, **fields) -> dict:
        record = {**self.context, "event": event, **fields}
        self.extend([record])
        return record

    def extend(self, records: Iterable[dict]) -> None:
        with self._lock:
            for rec in records:
                self.records.append(rec)
                if self._fh is not None:
                    self._fh.write(dumps(rec) + "\n")
                for fn in self._listeners:
                    fn(rec)
            if self._fh is not None:
                self._fh.flush()

    def child(self) -> "ChildLog":
        return ChildLog(dict(self.context))

    def merge(self, child: "ChildLog") -> None:
        self.extend(child.records)
        child.records = []

    def of(self, event: str) -> list[dict]:
        return [r for r in self.records if r["event"] == event]

    def to_bytes(self) -> bytes:
        return "".join(dumps(r) + "\n" for r in self.records).encode("utf-8")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class ChildLog:
    """Buffer for one unit of concurrent work; merged by the parent log."""

    def __init__(self, context: dict):
        self.context = context
        self.records: list[dict] = []

    def emit(self, event: str, **fields) -> dict:
        record = {**self.context, "event": event, **fields}
        self.records.append(record)
        return record


def read_events(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
