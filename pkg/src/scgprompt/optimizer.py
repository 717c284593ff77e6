"""Validation-gated co-optimisation of the system prompt, causal prompt and graph.

Each step samples a minibatch, runs the two-stage forward pass, computes
textual losses and gradients, then tries two candidate updates in turn:

* stage 1 revises the system prompt with everything else fixed;
* stage 2 revises the causal prompt and the graph together.

A candidate is committed only if it strictly raises validation weighted F1.
"""

from __future__ import annotations

import contextlib
import enum
import hashlib
import json
import os
import random
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

from .dataset import OrganizedPrompt, RecordTable, Split, TaskSpec, render_prompt
from .errors import BackendError, RejectedEdit
from .events import EventLog
from .metrics import Metrics, compute_metrics
from .pipeline import ForwardTrace, Models, forward
from .scg import Scg, parse_scg, render_scg
from .textgrad import (
    PromptVariable,
    TextGradient,
    accumulate,
    apply_gradient,
    compute_loss,
    guidance_gradient,
    initial_variables,
    output_gradient,
    variable_gradient,
)

CHECKPOINT_VERSION = 1
MIN_LENGTH_BUDGET = 500


class Mode(enum.Enum):
    FULL = "full"
    SINGLE_MODEL = "single"
    FIXED_GRAPH_SIDE = "fixed-graph"
    FIXED_SYS_PROMPT = "fixed-sys"
    NO_ITERATIVE = "no-iter"
    NO_OPT = "no-opt"


# variables that receive gradients in each mode
TRAINABLE = {
    Mode.FULL: ("system_prompt", "causal_system_prompt", "scg"),
    Mode.SINGLE_MODEL: ("system_prompt", "scg"),
    Mode.FIXED_GRAPH_SIDE: ("system_prompt",),
    Mode.FIXED_SYS_PROMPT: ("causal_system_prompt", "scg"),
    Mode.NO_ITERATIVE: ("system_prompt", "causal_system_prompt", "scg"),
    Mode.NO_OPT: (),
}


@dataclass(frozen=True)
class OptimizerConfig:
    steps: int = 8
    batch_size: int = 3
    seed: int = 0
    mode: Mode = Mode.FULL
    repeats: int = 3
    eval_concurrency: int = 1
    max_length_factor: float = 4.0
    accumulate_across_steps: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.eval_concurrency < 1:
            raise ValueError("eval_concurrency must be >= 1")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "batch_size": self.batch_size, "seed": self.seed,
                "mode": self.mode.value, "repeats": self.repeats,
                "eval_concurrency": self.eval_concurrency,
                "max_length_factor": self.max_length_factor,
                "accumulate_across_steps": self.accumulate_across_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        d["mode"] = Mode(d.get("mode", "full"))
        return cls(**d)


def sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def triple_hash(p_sys: str, p_cau: str, scg_text: str, single_model: bool = False) -> str:
    return sha(json.dumps([p_sys, p_cau, scg_text, single_model]))


@dataclass(frozen=True)
class Checkpoint:
    task: str
    config: dict
    seed: int
    step: int
    p_sys: str
    p_cau: str
    scg_text: str
    candidates: tuple[str, ...] = ()
    metrics: dict = field(default_factory=dict)
    repeat: int = 0

    @property
    def hashes(self) -> dict:
        body = self._body()
        return {
            "p_sys": sha(self.p_sys),
            "p_cau": sha(self.p_cau),
            "scg": sha(self.scg_text),
            "checkpoint": sha(json.dumps(body, sort_keys=True, ensure_ascii=False)),
        }

    def _body(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION, "task": self.task, "config": self.config,
            "seed": self.seed, "step": self.step, "repeat": self.repeat,
            "p_sys": self.p_sys, "p_cau": self.p_cau, "scg_text": self.scg_text,
            "candidates": sorted(self.candidates), "metrics": self.metrics,
        }

    def to_dict(self) -> dict:
        return {**self._body(), "hashes": self.hashes}

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        ckpt = cls(d["task"], d["config"], d["seed"], d["step"], d["p_sys"], d["p_cau"],
                   d["scg_text"], tuple(d.get("candidates", ())), d.get("metrics", {}), d.get("repeat", 0))
        stored = d.get("hashes", {}).get("checkpoint")
        if stored is not None and stored != ckpt.hashes["checkpoint"]:
            raise ValueError("checkpoint content does not match its recorded hash")
        return ckpt

    def graph(self, candidates=None) -> Scg:
        vocab = candidates if candidates is not None else (self.candidates or None)
        return parse_scg(self.scg_text, vocab)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunState:
    p_sys: PromptVariable
    p_cau: PromptVariable
    g: Scg
    best_f1: float
    step: int
    event_log: EventLog
    val_metrics: Optional[Metrics] = None
    repeat: int = 0
    checkpoints: list = field(default_factory=list)

    def triple_key(self, single_model: bool = False) -> str:
        return triple_hash(self.p_sys.value, self.p_cau.value, render_scg(self.g), single_model)


def load_state(ckpt: Checkpoint, task: TaskSpec, log: EventLog) -> RunState:
    vars_ = initial_variables(task)
    metrics = ckpt.metrics.get("val")
    return RunState(
        p_sys=replace(vars_["system_prompt"], value=ckpt.p_sys),
        p_cau=replace(vars_["causal_system_prompt"], value=ckpt.p_cau),
        g=parse_scg(ckpt.scg_text, task.scg_vocabulary),
        best_f1=metrics["weighted_f1"] if metrics else 0.0,
        step=ckpt.step,
        event_log=log,
        val_metrics=Metrics.from_dict(metrics) if metrics else None,
        repeat=ckpt.repeat,
    )


@contextlib.contextmanager
def log_context(log: EventLog, **fields):
    saved = dict(log.context)
    log.context.update(fields)
    try:
        yield
    finally:
        log.context.clear()
        log.context.update(saved)


class Optimizer:
    """Owns the task, models, validation cache and event log for one run."""

    def __init__(self, task: TaskSpec, table: RecordTable, split: Split, models: Models,
                 cfg: OptimizerConfig, log: Optional[EventLog] = None,
                 checkpoint_dir: Optional[Path] = None):
        self.task = task
        self.table = table
        self.split = split
        self.models = models
        self.cfg = cfg
        self.log = log if log is not None else EventLog()
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        self.single_model = cfg.mode is Mode.SINGLE_MODEL
        self.cache: dict[tuple[str, str], ForwardTrace] = {}
        self.sweeps = 0
        self._prompts: dict[str, OrganizedPrompt] = {}
        self._memory: dict[str, list[TextGradient]] = {}
        self._length_limits: dict[str, int] = {}

    # -- forwards and evaluation ------------------------------------------------

    def prompt(self, sid: str) -> OrganizedPrompt:
        if sid not in self._prompts:
            row = {**self.table.rows[sid], self.task.label_column: self.table.golds[sid]}
            self._prompts[sid] = render_prompt(self.task, row, sid)
        return self._prompts[sid]

    def _forwards(self, ids: Sequence[str], p_sys, p_cau, g: Scg) -> dict[str, ForwardTrace]:
        """Run forwards over ``ids``; logs are merged in ``ids`` order."""
        def one(sid):
            child = self.log.child()
            try:
                trace = forward(self.prompt(sid), g, p_sys, p_cau, self.models, self.task,
                                self.single_model, child)
            except Exception as exc:
                return sid, None, child, exc
            trace.loss = compute_loss(trace.label, self.table.golds[sid])
            child.emit("forward", sample=sid, calls=trace.calls, label=trace.label,
                       gold=self.table.golds[sid], verdict=trace.loss.verdict.value)
            return sid, trace, child, None

        if self.cfg.eval_concurrency > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.eval_concurrency) as pool:
                results = list(pool.map(one, ids))
        else:
            results = []
            for sid in ids:
                results.append(one(sid))
                if results[-1][3] is not None:
                    break
        traces, error = {}, None
        for sid, trace, child, exc in results:
            self.log.merge(child)
            if exc is not None:
                error = error or exc
            else:
                traces[sid] = trace
        if error is not None:
            self._pending = traces
            raise error
        return traces

    def evaluate(self, p_sys, p_cau, g: Scg, ids: Sequence[str], phase: str = "validation") -> Metrics:
        """Metrics of one (system prompt, causal prompt, graph) triple over ``ids``.

        Forwards are cached by (sample id, triple hash), so re-evaluating an
        unchanged triple costs no model calls.
        """
        if not ids:
            raise ValueError("cannot evaluate an empty split")
        key = triple_hash(p_sys.value, p_cau.value, render_scg(g), self.single_model)
        todo = [sid for sid in ids if (sid, key) not in self.cache]
        if todo:
            self.sweeps += 1
            with log_context(self.log, phase=phase, sweep=self.sweeps):
                self._pending = {}
                try:
                    traces = self._forwards(todo, p_sys, p_cau, g)
                except BackendError:
                    for sid, trace in self._pending.items():
                        self.cache[(sid, key)] = trace
                    raise
                for sid, trace in traces.items():
                    self.cache[(sid, key)] = trace
        preds = [self.cache[(sid, key)].label for sid in ids]
        golds = [self.table.golds[sid] for sid in ids]
        metrics = compute_metrics(preds, golds, self.task.labels)
        self.log.emit("evaluate", phase=phase, triple=key[:16], n=len(ids), misses=len(todo),
                      weighted_f1=metrics.weighted_f1, accuracy=metrics.accuracy,
                      parse_failure_rate=metrics.parse_failure_rate)
        return metrics

    # -- state ---------------------------------------------------------------------

    def initial_state(self, repeat: int = 0, scg: Optional[Scg] = None) -> RunState:
        vars_ = initial_variables(self.task)
        g = scg if scg is not None else self.task.initial_graph()
        self._memory = {}
        self._length_limits = {
            "system_prompt": self._limit(vars_["system_prompt"].value),
            "causal_system_prompt": self._limit(vars_["causal_system_prompt"].value),
            "scg": self._limit(render_scg(g)),
        }
        with log_context(self.log, repeat=repeat, step=0):
            self.log.emit("start", seed=self.cfg.seed + repeat, mode=self.cfg.mode.value)
            metrics = self.evaluate(vars_["system_prompt"], vars_["causal_system_prompt"], g, self.split.val)
            state = RunState(vars_["system_prompt"], vars_["causal_system_prompt"], g,
                             metrics.weighted_f1, 0, self.log, metrics, repeat)
            self._commit_checkpoint(state)
        return state

    def _limit(self, text: str) -> int:
        return int(self.cfg.max_length_factor * max(len(text), MIN_LENGTH_BUDGET))

    def checkpoint(self, state: RunState, test: Optional[Metrics] = None) -> Checkpoint:
        metrics = {"val": state.val_metrics.to_dict() if state.val_metrics else None}
        if test is not None:
            metrics["test"] = test.to_dict()
        return Checkpoint(
            task=self.task.name, config=self.cfg.to_dict(), seed=self.cfg.seed + state.repeat,
            step=state.step, p_sys=state.p_sys.value, p_cau=state.p_cau.value,
            scg_text=render_scg(state.g), candidates=tuple(sorted(self.task.scg_vocabulary)),
            metrics=metrics, repeat=state.repeat,
        )

    def _commit_checkpoint(self, state: RunState) -> None:
        ckpt = self.checkpoint(state)
        state.checkpoints.append(ckpt)
        self.log.emit("checkpoint", hash=ckpt.hashes["checkpoint"], best_f1=state.best_f1)
        if self.checkpoint_dir is not None:
            ckpt.save(self.checkpoint_dir / f"r{state.repeat}_step{state.step:03d}_{len(state.checkpoints):02d}.json")

    # -- one optimisation step -------------------------------------------------------

    def sample_batch(self, repeat: int, step: int) -> list[str]:
        rng = random.Random(f"{self.cfg.seed + repeat}:{step}")
        pool = list(self.split.train)
        return rng.sample(pool, min(self.cfg.batch_size, len(pool)))

    def _scg_var(self, state: RunState) -> PromptVariable:
        return initial_variables(self.task, render_scg(state.g))["scg"]

    def _gradients(self, state: RunState, traces: list[ForwardTrace]) -> dict[str, TextGradient]:
        trainable = TRAINABLE[self.cfg.mode]
        scg_var = self._scg_var(state)
        variables = {"system_prompt": state.p_sys, "causal_system_prompt": state.p_cau, "scg": scg_var}
        per_target: dict[str, list[TextGradient]] = {name: [] for name in trainable}
        backward = self.models.backward
        for trace in traces:
            out = output_gradient(trace, trace.loss, backward, self.log)
            if "system_prompt" in trainable:
                per_target["system_prompt"].append(variable_gradient(state.p_sys, trace, out, backward, self.log))
            graph_side = [n for n in ("causal_system_prompt", "scg") if n in trainable]
            if not graph_side:
                continue
            # single-model runs feed the graph straight into the prediction
            upstream = out if self.single_model else guidance_gradient(trace, out, backward, self.log)
            for name in graph_side:
                per_target[name].append(variable_gradient(variables[name], trace, upstream, backward, self.log))
        grads = {}
        for name, gs in per_target.items():
            grad = accumulate(gs)
            if self.cfg.accumulate_across_steps:
                history = self._memory.setdefault(name, [])
                history.append(grad)
                grad = accumulate(history)
            grads[name] = grad
        return grads

    def _propose(self, state: RunState, name: str, grad: TextGradient) -> str:
        if name == "system_prompt":
            return apply_gradient(state.p_sys, grad, self.models.backward, self.log)
        if name == "causal_system_prompt":
            return apply_gradient(state.p_cau, grad, self.models.backward, self.log)
        return apply_gradient(self._scg_var(state), grad, self.models.backward, self.log,
                              candidates=self.task.scg_vocabulary)

    def _gate(self, state: RunState, stage: str, grads: dict[str, TextGradient],
              names: Sequence[str]) -> RunState:
        """Build candidates for ``names``, evaluate them jointly, accept on strict gain."""
        names = [n for n in names if n in grads]
        if not names:
            return state
        current = {"system_prompt": state.p_sys.value, "causal_system_prompt": state.p_cau.value,
                   "scg": render_scg(state.g)}
        with log_context(self.log, stage=stage):
            decision = {"names": names, "f_before": state.best_f1, "f_candidate": None}
            try:
                with log_context(self.log, phase="backward"):
                    proposed = {n: self._propose(state, n, grads[n]) for n in names}
            except RejectedEdit as exc:
                self.log.emit("decision", accepted=False, reason="rejected-edit", detail=str(exc), **decision)
                return state
            changed = {n: v for n, v in proposed.items() if v != current[n]}
            decision["candidate_hashes"] = {n: sha(v)[:16] for n, v in proposed.items()}
            if not changed:
                self.log.emit("decision", accepted=False, reason="unchanged", **decision)
                return state
            too_long = [n for n, v in changed.items() if len(v) > self._length_limits[n]]
            if too_long:
                self.log.emit("decision", accepted=False, reason="too-long", detail=too_long, **decision)
                return state
            cand_sys = state.p_sys.committed(changed["system_prompt"], state.step) if "system_prompt" in changed else state.p_sys
            cand_cau = (state.p_cau.committed(changed["causal_system_prompt"], state.step)
                        if "causal_system_prompt" in changed else state.p_cau)
            cand_g = parse_scg(changed["scg"], self.task.scg_vocabulary) if "scg" in changed else state.g
            metrics = self.evaluate(cand_sys, cand_cau, cand_g, self.split.val)
            decision["f_candidate"] = metrics.weighted_f1
            if metrics.weighted_f1 > state.best_f1:
                state = replace(state, p_sys=cand_sys, p_cau=cand_cau, g=cand_g,
                                best_f1=metrics.weighted_f1, val_metrics=metrics)
                self.log.emit("decision", accepted=True, reason="improved", **decision)
                self._commit_checkpoint(state)
            else:
                self.log.emit("decision", accepted=False, reason="no-gain", **decision)
        return state

    def optimize_step(self, state: RunState) -> RunState:
        step = state.step + 1
        state = replace(state, step=step)
        with log_context(self.log, repeat=state.repeat, step=step):
            batch = self.sample_batch(state.repeat, step)
            self.log.emit("batch", samples=batch)
            with log_context(self.log, phase="train"):
                traces = self._forwards(batch, state.p_sys, state.p_cau, state.g)
            with log_context(self.log, phase="backward"):
                grads = self._gradients(state, [traces[sid] for sid in batch])
            mode = self.cfg.mode
            if mode is Mode.NO_ITERATIVE:
                state = self._gate(state, "joint", grads, ["system_prompt", "causal_system_prompt", "scg"])
            else:
                state = self._gate(state, "1", grads, ["system_prompt"])
                state = self._gate(state, "2", grads, ["causal_system_prompt", "scg"])
            self.log.emit("state", best_f1=state.best_f1, p_sys=sha(state.p_sys.value)[:16],
                          p_cau=sha(state.p_cau.value)[:16], scg=sha(render_scg(state.g))[:16])
        return state

    def run_repeat(self, repeat: int, scg: Optional[Scg] = None) -> RunState:
        state = self.initial_state(repeat, scg)
        steps = 0 if self.cfg.mode is Mode.NO_OPT else self.cfg.steps
        for _ in range(steps):
            state = self.optimize_step(state)
        return state


@dataclass
class RunResult:
    best: Checkpoint
    finals: list[Checkpoint]
    states: list[RunState]
    optimizer: Optimizer


def run(cfg: OptimizerConfig, task: TaskSpec, table: RecordTable, split: Split, models: Models,
        log: Optional[EventLog] = None, scg: Optional[Scg] = None,
        checkpoint_dir: Optional[Path] = None) -> RunResult:
    """Independent repeats; the best validation checkpoint is scored once on test."""
    opt = Optimizer(task, table, split, models, cfg, log, checkpoint_dir)
    states = [opt.run_repeat(i, scg) for i in range(cfg.repeats)]
    winner = max(states, key=lambda s: s.best_f1)  # max keeps the earliest on ties
    test = None
    if split.test:
        with log_context(opt.log, repeat=winner.repeat, step=winner.step):
            test = opt.evaluate(winner.p_sys, winner.p_cau, winner.g, split.test, phase="test")
    best = opt.checkpoint(winner, test)
    opt.log.emit("result", repeat=winner.repeat, best_f1=winner.best_f1, hash=best.hashes["checkpoint"],
                 test_f1=test.weighted_f1 if test else None)
    if checkpoint_dir is not None:
        best.save(Path(checkpoint_dir).parent / "best.json")
    return RunResult(best, [opt.checkpoint(s) for s in states], states, opt)
