"""Chat-completion gateway with live, scripted and cassette backends.

Every call goes through :func:`complete`, which applies rate limiting and
capped exponential backoff, then writes one ``call`` record to the event
log.  The usage ledger is fed from those records, so the ledger and the log
can never disagree.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import httpx

from .errors import BackendError, ScriptMiss, TransientError

API_KEY_ENV = "EGO_API_KEY_{alias}"
MILLION = Decimal(1_000_000)


class Role(enum.Enum):
    FORWARD = "forward"
    GRAPH = "graph_description"
    BACKWARD = "backward"


@dataclass(frozen=True)
class ModelSpec:
    role: Role
    model: str
    endpoint: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024
    # USD per million tokens
    price_in: Decimal = Decimal(0)
    price_out: Decimal = Decimal(0)
    alias: str = "DEFAULT"

    def cost(self, prompt_tokens: int, completion_tokens: int) -> Decimal:
        return (Decimal(prompt_tokens) * Decimal(self.price_in)
                + Decimal(completion_tokens) * Decimal(self.price_out)) / MILLION

    def api_key(self) -> Optional[str]:
        return os.environ.get(API_KEY_ENV.format(alias=self.alias.upper()))

    def as_role(self, role: Role) -> "ModelSpec":
        return ModelSpec(role, self.model, self.endpoint, self.temperature, self.max_tokens,
                         self.price_in, self.price_out, self.alias)

    def to_dict(self) -> dict:
        return {
            "role": self.role.value, "model": self.model, "endpoint": self.endpoint,
            "temperature": self.temperature, "max_tokens": self.max_tokens,
            "price_in": str(self.price_in), "price_out": str(self.price_out), "alias": self.alias,
        }


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    model: str = ""
    tag: str = ""

    def canonical(self) -> str:
        return json.dumps(
            {
                "model": self.model,
                "messages": [list(m) for m in self.messages],
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
            },
            sort_keys=True, ensure_ascii=False, separators=(",", ":"),
        )

    def key(self) -> str:
        """Content hash; the tag is metadata and does not participate."""
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def text(self) -> str:
        return "\n".join(f"{role}: {content}" for role, content in self.messages)

    def content(self, role: str) -> str:
        return "\n".join(c for r, c in self.messages if r == role)

    def to_openai(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0
    attempts: int = 1

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token usage must be non-negative")


class Backend(Protocol):
    def send(self, request: ChatRequest, spec: ModelSpec) -> ChatResponse: ...


# -- live HTTP ----------------------------------------------------------------


class HttpBackend:
    """OpenAI-compatible ``POST {endpoint}/chat/completions``."""

    def __init__(self, endpoint: str, api_key: Optional[str] = None,
                 client: Optional[httpx.Client] = None, timeout: float = 120.0):
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=timeout)

    def send(self, request: ChatRequest, spec: ModelSpec) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        key = self.api_key if self.api_key is not None else spec.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        start = time.monotonic()
        try:
            resp = self.client.post(f"{self.endpoint}/chat/completions",
                                    json=request.to_openai(), headers=headers)
        except httpx.TransportError as exc:
            raise TransientError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {resp.text[:500]}") from exc
        usage = body.get("usage") or {}
        return ChatResponse(
            content=content,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency=time.monotonic() - start,
        )


# -- scripted -----------------------------------------------------------------

Responder = Callable[[ChatRequest], Optional[str]]


def estimate_tokens(text: str) -> int:
    return len(text.split())


class ScriptedBackend:
    """Deterministic table-driven stand-in for a model endpoint.

    Lookup order: exact request hash, alias (the request tag), longest
    matching prefix of the rendered request text, then ``responder``.
    Anything unresolved raises :class:`ScriptMiss`.
    """

    def __init__(self, hashes: Optional[dict[str, str]] = None,
                 aliases: Optional[dict[str, str]] = None,
                 prefixes: Optional[dict[str, str]] = None,
                 responder: Optional[Responder] = None,
                 count_tokens: bool = False):
        self.hashes = dict(hashes or {})
        self.aliases = dict(aliases or {})
        self.prefixes = dict(prefixes or {})
        self.responder = responder
        self.count_tokens = count_tokens

    @classmethod
    def from_file(cls, path: Union[str, Path], **kwargs) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            table = json.load(fh)
        return cls(table.get("hashes"), table.get("aliases"), table.get("prefixes"), **kwargs)

    def resolve(self, request: ChatRequest) -> str:
        key = request.key()
        if key in self.hashes:
            return self.hashes[key]
        if request.tag in self.aliases:
            return self.aliases[request.tag]
        text = request.text()
        hits = [p for p in self.prefixes if text.startswith(p)]
        if hits:
            return self.prefixes[max(hits, key=len)]
        if self.responder is not None:
            out = self.responder(request)
            if out is not None:
                return out
        raise ScriptMiss(f"no scripted response for tag={request.tag!r} hash={key[:12]}")

    def send(self, request: ChatRequest, spec: ModelSpec) -> ChatResponse:
        content = self.resolve(request)
        if self.count_tokens:
            return ChatResponse(content, estimate_tokens(request.text()), estimate_tokens(content))
        return ChatResponse(content)


# -- record / replay ------------------------------------------------------------


class Cassette:
    """JSON-lines file of ``request hash -> response``.

    Repeated identical requests are stored in order and replayed in order;
    once a hash is exhausted its last response is reused.
    """

    def __init__(self, path: Union[str, Path, None] = None):
        self.path = Path(path) if path is not None else None
        self.entries: dict[str, list[dict]] = defaultdict(list)
        self._cursor: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self.entries[rec["key"]].append(rec)

    def record(self, request: ChatRequest, response: ChatResponse) -> None:
        rec = {
            "key": request.key(), "tag": request.tag, "content": response.content,
            "prompt_tokens": response.prompt_tokens, "completion_tokens": response.completion_tokens,
        }
        with self._lock:
            self.entries[rec["key"]].append(rec)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")

    def next(self, request: ChatRequest) -> dict:
        key = request.key()
        with self._lock:
            recs = self.entries.get(key)
            if not recs:
                raise ScriptMiss(f"cassette has no entry for tag={request.tag!r} hash={key[:12]}")
            i = min(self._cursor[key], len(recs) - 1)
            self._cursor[key] += 1
            return recs[i]


class RecordingBackend:
    def __init__(self, inner: Backend, cassette: Cassette):
        self.inner = inner
        self.cassette = cassette

    def send(self, request: ChatRequest, spec: ModelSpec) -> ChatResponse:
        response = self.inner.send(request, spec)
        self.cassette.record(request, response)
        return response


class ReplayBackend:
    def __init__(self, cassette: Cassette):
        self.cassette = cassette

    def send(self, request: ChatRequest, spec: ModelSpec) -> ChatResponse:
        rec = self.cassette.next(request)
        return ChatResponse(rec["content"], rec["prompt_tokens"], rec["completion_tokens"])


# -- rate limiting and retries --------------------------------------------------


class TokenBucket:
    def __init__(self, rate: float, capacity: Optional[float] = None,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            self.sleep(wait)


_limiters: dict[str, TokenBucket] = {}
_limiters_lock = threading.Lock()


def shared_limiter(endpoint: str, rate: float) -> TokenBucket:
    """One bucket per endpoint, shared by every handle that talks to it."""
    with _limiters_lock:
        if endpoint not in _limiters:
            _limiters[endpoint] = TokenBucket(rate)
        return _limiters[endpoint]


@dataclass(frozen=True)
class RetryPolicy:
    max_tries: int = 5
    base_delay: float = 1.0
    max_delay: float = 30.0
    sleep: Callable[[float], None] = time.sleep

    def delay(self, attempt: int) -> float:
        return min(self.max_delay, self.base_delay * 2 ** (attempt - 1))


def complete(spec: ModelSpec, request: ChatRequest, backend: Backend, log=None,
             retry: RetryPolicy = RetryPolicy(), limiter: Optional[TokenBucket] = None) -> ChatResponse:
    attempt = 0
    while True:
        attempt += 1
        if limiter is not None:
            limiter.acquire()
        try:
            response = backend.send(request, spec)
            break
        except TransientError as exc:
            if attempt >= retry.max_tries:
                raise BackendError(f"{spec.model}: giving up after {attempt} attempts: {exc}") from exc
            retry.sleep(retry.delay(attempt))
    if attempt != response.attempts:
        response = ChatResponse(response.content, response.prompt_tokens,
                                response.completion_tokens, response.latency, attempt)
    if log is not None:
        log.emit(
            "call",
            role=spec.role.value,
            model=spec.model,
            tag=request.tag,
            request=request.key(),
            response=hashlib.sha256(response.content.encode("utf-8")).hexdigest(),
            prompt_tokens=response.prompt_tokens,
            completion_tokens=response.completion_tokens,
            cost=str(spec.cost(response.prompt_tokens, response.completion_tokens)),
            attempts=response.attempts,
        )
    return response


@dataclass
class ModelHandle:
    """A model spec bound to the backend that serves it."""

    spec: ModelSpec
    backend: Backend
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    limiter: Optional[TokenBucket] = None

    def request(self, messages: Sequence[tuple[str, str]], tag: str = "",
                max_tokens: Optional[int] = None) -> ChatRequest:
        return ChatRequest(
            messages=tuple((r, c) for r, c in messages),
            temperature=self.spec.temperature,
            max_tokens=max_tokens or self.spec.max_tokens,
            model=self.spec.model,
            tag=tag,
        )

    def chat(self, messages: Sequence[tuple[str, str]], tag: str = "", log=None) -> ChatResponse:
        return complete(self.spec, self.request(messages, tag), self.backend, log,
                        self.retry, self.limiter)


# -- cost accounting ------------------------------------------------------------


@dataclass(frozen=True)
class CallRecord:
    role: str
    tag: str
    step: Optional[int]
    phase: Optional[str]
    stage: Optional[str]
    sweep: Optional[int]
    prompt_tokens: int
    completion_tokens: int
    cost: Decimal
    repeat: Optional[int] = None


class UsageLedger:
    def __init__(self):
        self.calls: list[CallRecord] = []
        self._lock = threading.Lock()

    def observe(self, record: dict) -> None:
        if record.get("event") != "call":
            return
        with self._lock:
            self.calls.append(CallRecord(
                role=record["role"], tag=record.get("tag", ""), step=record.get("step"),
                phase=record.get("phase"), stage=record.get("stage"), sweep=record.get("sweep"),
                prompt_tokens=record["prompt_tokens"], completion_tokens=record["completion_tokens"],
                cost=Decimal(record["cost"]), repeat=record.get("repeat"),
            ))

    @classmethod
    def from_events(cls, records) -> "UsageLedger":
        ledger = cls()
        for rec in records:
            ledger.observe(rec)
        return ledger

    def total(self) -> Decimal:
        return sum((c.cost for c in self.calls), Decimal(0))

    def tokens(self) -> dict[str, tuple[int, int]]:
        out: dict[str, list[int]] = defaultdict(lambda: [0, 0])
        for c in self.calls:
            out[c.role][0] += c.prompt_tokens
            out[c.role][1] += c.completion_tokens
        return {k: (v[0], v[1]) for k, v in out.items()}

    def by_role(self) -> dict[str, Decimal]:
        out: dict[str, Decimal] = defaultdict(Decimal)
        for c in self.calls:
            out[c.role] += c.cost
        return dict(out)


@dataclass
class CostRow:
    step: int
    cost_by_role: dict[str, Decimal]
    guidance_calls: int
    prediction_calls: int
    backward_chains: int
    validation_sweeps: int
    total_calls: int

    @property
    def total(self) -> Decimal:
        return sum(self.cost_by_role.values(), Decimal(0))


@dataclass
class CostReport:
    rows: list[CostRow]
    problems: dict[int, list[str]]

    @property
    def mean(self) -> Decimal:
        return sum((r.total for r in self.rows), Decimal(0)) / len(self.rows)

    @property
    def audit_ok(self) -> bool:
        return not any(self.problems.values())

    def to_text(self) -> str:
        roles = sorted({role for r in self.rows for role in r.cost_by_role} | {"forward", "backward"})
        head = ["step"] + [f"{r} $" for r in roles] + ["total $", "guid", "pred", "chains", "sweeps", "audit"]
        lines = [head]
        for r in self.rows:
            lines.append(
                [str(r.step)] + [f"{r.cost_by_role.get(role, Decimal(0)):.4f}" for role in roles]
                + [f"{r.total:.4f}", str(r.guidance_calls), str(r.prediction_calls),
                   str(r.backward_chains), str(r.validation_sweeps),
                   "ok" if not self.problems.get(r.step) else "; ".join(self.problems[r.step])]
            )
        lines.append(["mean"] + [""] * len(roles) + [f"{self.mean:.4f}", "", "", "", "", ""])
        widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines)


def cost_report(ledger: UsageLedger, steps: int, batch_size: Optional[int] = None,
                repeat: Optional[int] = None) -> CostReport:
    """Per-step cost by role plus an audit of the per-step call pattern.

    Expected per optimisation step: ``batch_size`` training forwards through
    the prediction model (and as many through the graph-description model
    when guidance is in use, re-asks aside), at most two backward chains
    (one per stage), and at most two validation sweeps that reached a model.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rows, problems = [], {}
    for step in range(1, steps + 1):
        calls = [c for c in ledger.calls if c.step == step and (repeat is None or c.repeat == repeat)]
        by_role: dict[str, Decimal] = defaultdict(Decimal)
        for c in calls:
            by_role[c.role] += c.cost
        train = [c for c in calls if c.phase == "train"]
        guidance = [c for c in train if c.tag.startswith("guidance::")]
        prediction = [c for c in train if c.tag.startswith("predict::")]
        chains = {c.stage for c in calls if c.phase == "backward" and c.tag.startswith("apply::")}
        sweeps = {c.sweep for c in calls if c.phase == "validation"}
        row = CostRow(step, dict(by_role), len(guidance), len(prediction), len(chains),
                      len(sweeps), len(calls))
        issues = []
        if batch_size is not None and row.prediction_calls != batch_size:
            issues.append(f"{row.prediction_calls} prediction forwards, expected {batch_size}")
        if batch_size is not None and row.guidance_calls and row.guidance_calls < batch_size:
            issues.append(f"{row.guidance_calls} guidance forwards, expected >= {batch_size}")
        if row.backward_chains > 2:
            issues.append(f"{row.backward_chains} backward chains")
        if row.validation_sweeps > 2:
            issues.append(f"{row.validation_sweeps} validation sweeps")
        rows.append(row)
        problems[step] = issues
    return CostReport(rows, problems)
