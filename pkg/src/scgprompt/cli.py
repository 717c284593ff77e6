"""Co-optimise a semantic causal graph and the prompts that read it.

Every command that calls a model writes a self-describing run directory::

    <out>/<YYYYmmdd-HHMMSS>-seed<N>-<verb>/
        config.json   split.json   events.jsonl   cassette.jsonl
        ledger.json   checkpoints/  best.json     summary.csv

``replay`` re-executes a run from its cassette without touching the network.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib
import json
import logging
import os
import shutil
import sys
import time
from decimal import Decimal
from pathlib import Path
from typing import Optional

from . import __version__
from .dataset import RecordTable, Split, TaskSpec, balanced_split, load_task, save_task
from .errors import BackendError, ConfigError, InsufficientData, ScgError, ScriptMiss
from .events import EventLog, read_events
from .llm import (
    Cassette, HttpBackend, ModelHandle, ModelSpec, RecordingBackend, ReplayBackend, Role,
    ScriptedBackend, UsageLedger, cost_report, shared_limiter,
)
from .metrics import Metrics, format_table, write_csv
from .optimizer import Checkpoint, Mode, OptimizerConfig, Optimizer, load_state, log_context, run
from .pipeline import Models
from .scg import Scg, diff_scg, edge_changes, parse_scg, reverse_scg, subsample_scg

log = logging.getLogger("scgprompt")

SCG_VARIANTS = ("full", "empty", "reversed", "frac=0.33", "frac=0.66")
COMPLETENESS_ORDER = ("reversed", "empty", "frac=0.33", "frac=0.66", "full")
ABLATION_ORDER = ("full", "single", "fixed-graph", "fixed-sys", "no-iter", "no-opt")


class UsageError(Exception):
    """Bad flags or inputs; reported before any model call."""


# -- argument parsing -------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser, mode: bool = True, scg: bool = True) -> None:
    p.add_argument("--task", required=True, help="task.yaml or a directory holding one")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    if mode:
        p.add_argument("--mode", choices=[m.value for m in Mode], default="full")
    if scg:
        p.add_argument("--scg", choices=SCG_VARIANTS, default="full")
    p.add_argument("--val-n", type=int, default=100)
    p.add_argument("--test-n", type=int, default=100)
    p.add_argument("--concurrency", type=int, default=1, help="parallel forwards during evaluation")
    p.add_argument("--max-length-factor", type=float, default=4.0)
    _backend_flags(p)


def _backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["live", "scripted", "replay"], default="scripted")
    p.add_argument("--script", help="scripted response table (JSON)")
    p.add_argument("--cassette", help="cassette to replay (for --backend replay)")
    p.add_argument("--endpoint", help="OpenAI-compatible base URL, e.g. https://host/v1")
    p.add_argument("--endpoint-alias", default="DEFAULT", help="key is read from EGO_API_KEY_<ALIAS>")
    p.add_argument("--forward-model", default="gpt-4o-mini")
    p.add_argument("--backward-model", default="gpt-4o")
    p.add_argument("--price-in", default="0", help="USD per million prompt tokens")
    p.add_argument("--price-out", default="0", help="USD per million completion tokens")
    p.add_argument("--rate", type=float, default=2.0, help="live requests per second per endpoint")
    p.add_argument("--out", default="runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scgprompt", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("init-task", help="validate a task and write a normalised copy with its split")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--task", help="task.yaml or directory")
    src.add_argument("--example", choices=["planted"], help="generate a built-in synthetic task")
    p.add_argument("--out", required=True, help="directory to write task.yaml, data.csv, split.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-n", type=int, default=100)
    p.add_argument("--test-n", type=int, default=100)

    _run_flags(sub.add_parser("optimize", help="co-optimise prompts and graph"))

    p = sub.add_parser("eval", help="score the initial triple or a checkpoint on val and test")
    _run_flags(p, mode=True, scg=True)
    p.add_argument("--checkpoint", help="checkpoint JSON to evaluate instead of the initial triple")

    p = sub.add_parser("scg-diff", help="show how a graph changed between two checkpoints or SCG files")
    p.add_argument("old")
    p.add_argument("new")

    _run_flags(sub.add_parser("ablate", help="run every optimisation mode and tabulate"), mode=False)
    _run_flags(sub.add_parser("completeness", help="run every prior-graph variant and tabulate"), scg=False)

    p = sub.add_parser("cost", help="per-step cost table and call-pattern audit of a run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--repeat", type=int, help="restrict to one repeat")

    p = sub.add_parser("replay", help="re-execute a run from its cassette with no network")
    p.add_argument("--run", required=True, help="run directory")
    return parser


def _validate(args) -> None:
    for name in ("steps", "batch", "repeats", "val_n", "test_n", "concurrency"):
        v = getattr(args, name, None)
        if v is None:
            continue
        low = 0 if name in ("steps", "val_n", "test_n") else 1
        if v < low:
            raise UsageError(f"--{name.replace('_', '-')} must be >= {low}, got {v}")
    if getattr(args, "backend", None) == "live":
        if not args.endpoint:
            raise UsageError("--backend live needs --endpoint")
        env = f"EGO_API_KEY_{args.endpoint_alias.upper()}"
        if not os.environ.get(env):
            raise UsageError(f"--backend live needs the API key in ${env}")
    if getattr(args, "backend", None) == "replay" and not args.cassette:
        raise UsageError("--backend replay needs --cassette")
    for name in ("price_in", "price_out"):
        if hasattr(args, name):
            try:
                Decimal(getattr(args, name))
            except Exception:
                raise UsageError(f"--{name.replace('_', '-')} must be a decimal number") from None


# -- building blocks ------------------------------------------------------------


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def task_hash(task_path: Path, task: TaskSpec) -> str:
    path = task_path / "task.yaml" if task_path.is_dir() else task_path
    parts = [_digest(path)]
    if task.data:
        parts.append(_digest((path.parent / task.data).resolve()))
    return hashlib.sha256("".join(parts).encode()).hexdigest()


def resolve_task(arg: str) -> Path:
    """A path to a task, or a bare name looked up under ``./tasks``."""
    path = Path(arg)
    if not path.exists() and len(path.parts) == 1 and (Path("tasks") / arg).is_dir():
        return Path("tasks") / arg
    return path


def make_split(table: RecordTable, args) -> Split:
    return balanced_split(table, val_n=args.val_n, test_n=args.test_n, seed=args.seed)


def _load_factory(ref: str):
    module, _, attr = ref.partition(":")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load scripted responder {ref!r}: {exc}") from exc


def make_backend(args, task: TaskSpec, table: RecordTable, split: Split):
    """Backend for one setting; scripted responders are built fresh each time."""
    if args.backend == "replay":
        return ReplayBackend(Cassette(args.cassette))
    if args.backend == "live":
        return HttpBackend(args.endpoint)
    if args.script:
        return ScriptedBackend.from_file(args.script, count_tokens=True)
    if task.scripted_responder:
        return _load_factory(task.scripted_responder)(task, table, split, count_tokens=True)
    raise UsageError("--backend scripted needs --script or a task with a scripted_responder")


def make_models(args, backend) -> Models:
    price_in, price_out = Decimal(args.price_in), Decimal(args.price_out)
    endpoint = args.endpoint or ""
    limiter = shared_limiter(endpoint, args.rate) if args.backend == "live" else None
    fwd = ModelSpec(Role.FORWARD, args.forward_model, endpoint, max_tokens=1024,
                    price_in=price_in, price_out=price_out, alias=args.endpoint_alias)
    bwd = ModelSpec(Role.BACKWARD, args.backward_model, endpoint, max_tokens=2048,
                    price_in=price_in, price_out=price_out, alias=args.endpoint_alias)
    return Models(
        forward=ModelHandle(fwd, backend, limiter=limiter),
        backward=ModelHandle(bwd, backend, limiter=limiter),
        graph=ModelHandle(fwd.as_role(Role.GRAPH), backend, limiter=limiter),
    )


def scg_variant(task: TaskSpec, name: str, seed: int) -> Scg:
    g = task.initial_graph()
    if name == "full":
        return g
    if name == "empty":
        return Scg((), task.scg_vocabulary)
    if name == "reversed":
        return reverse_scg(g)
    if name.startswith("frac="):
        return subsample_scg(g, float(name.split("=", 1)[1]), seed)
    raise UsageError(f"unknown --scg variant {name!r}")


def optimizer_config(args, mode: Optional[str] = None) -> OptimizerConfig:
    return OptimizerConfig(
        steps=args.steps, batch_size=args.batch, seed=args.seed,
        mode=Mode(mode or getattr(args, "mode", "full")), repeats=args.repeats,
        eval_concurrency=args.concurrency, max_length_factor=args.max_length_factor,
    )


def new_run_dir(args) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(args.out) / f"{stamp}-seed{args.seed}-{args.verb}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _run_config(args, task_path: Path, task: TaskSpec) -> dict:
    keys = ("verb", "steps", "batch", "seed", "repeats", "mode", "scg", "val_n", "test_n", "concurrency",
            "max_length_factor", "backend", "endpoint", "endpoint_alias", "forward_model",
            "backward_model", "price_in", "price_out", "checkpoint")
    flags = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    return {"version": __version__, "task_path": str(task_path.resolve()), "task": task.name,
            "task_hash": task_hash(task_path, task), "flags": flags}


class Session:
    """One setting's event log, cassette and checkpoint directory."""

    def __init__(self, root: Path, args, task, table, split):
        self.root = root
        self.log = EventLog(root / "events.jsonl")
        self.ledger = UsageLedger()
        self.log.subscribe(self.ledger.observe)
        backend = make_backend(args, task, table, split)
        if args.backend != "replay":
            backend = RecordingBackend(backend, Cassette(root / "cassette.jsonl"))
        self.models = make_models(args, backend)

    def close(self) -> None:
        self.log.close()
        _write_json(self.root / "ledger.json", {
            "total_usd": str(self.ledger.total()),
            "by_role_usd": {k: str(v) for k, v in self.ledger.by_role().items()},
            "tokens": {k: list(v) for k, v in self.ledger.tokens().items()},
            "calls": len(self.ledger.calls),
        })


def _setup(args):
    task_path = resolve_task(args.task)
    task, table = load_task(task_path)
    split = make_split(table, args)
    run_dir = new_run_dir(args)
    _write_json(run_dir / "config.json", _run_config(args, task_path, task))
    _write_json(run_dir / "split.json", split.to_dict())
    return task_path, task, table, split, run_dir


def _optimize_setting(root: Path, args, task, table, split, mode: Optional[str] = None,
                      scg: Optional[str] = None):
    session = Session(root, args, task, table, split)
    cfg = optimizer_config(args, mode)
    try:
        g = scg_variant(task, scg or getattr(args, "scg", "full"), args.seed)
        result = run(cfg, task, table, split, session.models, session.log, g, root / "checkpoints")
    finally:
        session.close()
    return result


def _results_row(ckpt: Checkpoint) -> dict:
    val = ckpt.metrics.get("val")
    test = ckpt.metrics.get("test")
    return {"val": Metrics.from_dict(val) if val else None, "test": Metrics.from_dict(test) if test else None}


# -- commands ---------------------------------------------------------------------


def cmd_init_task(args) -> int:
    if args.example == "planted":
        from .scenarios import planted_task
        task, table = planted_task()
    else:
        task, table = load_task(resolve_task(args.task))
    out = Path(args.out)
    save_task(task, table, out)
    split = balanced_split(table, val_n=args.val_n, test_n=args.test_n, seed=args.seed)
    _write_json(out / "split.json", split.to_dict())
    g = task.initial_graph()
    print(f"task {task.name}: {len(table)} records, labels {table.label_counts()}")
    print(f"blocks: {', '.join(task.block_names)}")
    print(f"initial graph: {len(g)} statements, {len(g.edges)} edges")
    print(f"split (seed {args.seed}): train {len(split.train)}, val {len(split.val)}, test {len(split.test)}"
          + (" [proportional fallback]" if split.proportional else ""))
    print(f"wrote {out / 'task.yaml'}")
    return 0


def cmd_optimize(args) -> int:
    _, task, table, split, run_dir = _setup(args)
    result = _optimize_setting(run_dir, args, task, table, split)
    results = {f"{args.mode} / {args.scg}": _results_row(result.best)}
    write_csv(run_dir / "summary.csv", results)
    print(format_table(results))
    print(f"\nbest: repeat {result.best.repeat}, checkpoint {result.best.hashes['checkpoint'][:16]}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    _, task, table, split, run_dir = _setup(args)
    session = Session(run_dir, args, task, table, split)
    cfg = optimizer_config(args)
    opt = Optimizer(task, table, split, session.models, cfg, session.log)
    try:
        if args.checkpoint:
            state = load_state(Checkpoint.load(args.checkpoint), task, session.log)
        else:
            state = opt.initial_state(0, scg_variant(task, args.scg, args.seed))
        with log_context(session.log, repeat=0, step=state.step):
            val = opt.evaluate(state.p_sys, state.p_cau, state.g, split.val)
            test = opt.evaluate(state.p_sys, state.p_cau, state.g, split.test, phase="test") if split.test else None
    finally:
        session.close()
    state.val_metrics = val
    opt.checkpoint(state, test).save(run_dir / "best.json")
    results = {"checkpoint" if args.checkpoint else f"initial / {args.scg}": {"val": val, "test": test}}
    write_csv(run_dir / "summary.csv", results)
    print(format_table(results))
    print(f"\nrun directory: {run_dir}")
    return 0


def _load_graph(path: str) -> Scg:
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        ckpt = Checkpoint.from_dict(json.loads(text))
        return parse_scg(ckpt.scg_text, ckpt.candidates or None)
    return parse_scg(text)


def cmd_scg_diff(args) -> int:
    old, new = _load_graph(args.old), _load_graph(args.new)
    diff = diff_scg(old, new)
    added, removed = edge_changes(old, new)
    if not diff and not added and not removed:
        print("graphs are identical")
        return 0
    print("Statements")
    print(diff.render() or "  (no statement-level changes)")
    print("\nEdges")
    for s, t in removed:
        print(f"- [{s}] affects [{t}]")
    for s, t in added:
        print(f"+ [{s}] affects [{t}]")
    return 0


def cmd_ablate(args) -> int:
    _, task, table, split, run_dir = _setup(args)
    results = {}
    for mode in ABLATION_ORDER:
        result = _optimize_setting(run_dir / "settings" / mode, args, task, table, split, mode=mode)
        results[mode] = _results_row(result.best)
    write_csv(run_dir / "summary.csv", results)
    print(format_table(results))
    print(f"\nrun directory: {run_dir}")
    return 0


def cmd_completeness(args) -> int:
    _, task, table, split, run_dir = _setup(args)
    results = {}
    for variant in COMPLETENESS_ORDER:
        name = variant.replace("=", "")
        result = _optimize_setting(run_dir / "settings" / name, args, task, table, split, scg=variant)
        results[variant] = _results_row(result.best)
    write_csv(run_dir / "summary.csv", results)
    print(format_table(results))
    print(f"\nrun directory: {run_dir}")
    return 0


def cmd_cost(args) -> int:
    run_dir = Path(args.run)
    config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    flags = config["flags"]
    events_path = run_dir / "events.jsonl"
    if not events_path.exists():
        raise UsageError(f"{events_path} not found (cost works on optimize run directories)")
    ledger = UsageLedger.from_events(read_events(events_path))
    steps = flags.get("steps", 0)
    print(f"total: ${ledger.total()} over {len(ledger.calls)} calls")
    for role, cost in sorted(ledger.by_role().items()):
        print(f"  {role}: ${cost}")
    if steps < 1:
        return 0
    repeats = [args.repeat] if args.repeat is not None else sorted({c.repeat for c in ledger.calls
                                                                     if c.repeat is not None})
    ok = True
    for r in repeats:
        report = cost_report(ledger, steps, flags.get("batch"), repeat=r)
        print(f"\nrepeat {r}")
        print(report.to_text())
        ok = ok and report.audit_ok
    return 0 if ok else 1


def cmd_replay(args) -> int:
    run_dir = Path(args.run)
    config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    flags = dict(config["flags"])
    verb = flags.pop("verb")
    if verb not in ("optimize", "eval"):
        raise UsageError(f"replay supports optimize and eval runs, not {verb!r}")
    cassette = run_dir / "cassette.jsonl"
    if not cassette.exists():
        raise UsageError(f"{cassette} not found")
    rargs = argparse.Namespace(**flags)
    rargs.verb = verb
    rargs.backend = "replay"
    rargs.cassette = str(cassette)
    rargs.script = None
    rargs.rate = 1.0
    task_path = Path(config["task_path"])
    task, table = load_task(task_path)
    if task_hash(task_path, task) != config["task_hash"]:
        raise UsageError("task files changed since the run was recorded")
    split = Split.from_dict(json.loads((run_dir / "split.json").read_text(encoding="utf-8")))
    out = run_dir / "replay"
    if out.exists():
        shutil.rmtree(out)
    if verb == "optimize":
        result = _optimize_setting(out, rargs, task, table, split)
        got = result.best.hashes["checkpoint"]
    else:
        session = Session(out, rargs, task, table, split)
        opt = Optimizer(task, table, split, session.models, optimizer_config(rargs), session.log)
        try:
            if rargs.checkpoint:
                state = load_state(Checkpoint.load(rargs.checkpoint), task, session.log)
            else:
                state = opt.initial_state(0, scg_variant(task, rargs.scg, rargs.seed))
            with log_context(session.log, repeat=0, step=state.step):
                state.val_metrics = opt.evaluate(state.p_sys, state.p_cau, state.g, split.val)
                test = opt.evaluate(state.p_sys, state.p_cau, state.g, split.test, phase="test") if split.test else None
        finally:
            session.close()
        got = opt.checkpoint(state, test).hashes["checkpoint"]
    want = Checkpoint.load(run_dir / "best.json").hashes["checkpoint"]
    if got == want:
        print(f"replay reproduced checkpoint {got}")
        return 0
    print(f"replay mismatch: recorded {want}, replayed {got}")
    return 1


COMMANDS = {
    "init-task": cmd_init_task,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
    "scg-diff": cmd_scg_diff,
    "ablate": cmd_ablate,
    "completeness": cmd_completeness,
    "cost": cmd_cost,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        return COMMANDS[args.verb](args)
    except (UsageError, ConfigError, InsufficientData, ScgError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BackendError, ScriptMiss) as exc:
        print(f"error: model call failed: {exc} (artifacts written so far are kept)", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
