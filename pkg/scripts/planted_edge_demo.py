"""Run the planted-edge scenario offline and show what the optimizer did.

The synthetic task hides its outcome in the sensor reading, but the initial
graph never mentions that block.  The scripted backward engine first proposes
a distractor statement, then a cyclic graph, then the missing statement; the
gate should reject the first two and commit the third.

    python scripts/planted_edge_demo.py [--steps 6] [--seed 0]
"""

from __future__ import annotations

import argparse
import time

from scgprompt.events import EventLog
from scgprompt.optimizer import OptimizerConfig, run
from scgprompt.scenarios import (
    PLANTED_HEADER, planted_backend, planted_split, planted_task, scripted_models,
)
from scgprompt.scg import diff_scg, parse_scg


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--steps", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    task, table = planted_task(seed=args.seed)
    split = planted_split(table, seed=args.seed)
    log = EventLog()
    start = time.perf_counter()
    result = run(OptimizerConfig(steps=args.steps, repeats=1, seed=args.seed), task, table, split,
                 scripted_models(planted_backend(task, table, split)), log)
    elapsed = time.perf_counter() - start

    print(f"{'step':>4}  {'stage':<5}  {'reason':<14}  f_before  f_candidate")
    for d in log.of("decision"):
        cand = "-" if d["f_candidate"] is None else f"{d['f_candidate']:.3f}"
        print(f"{d['step']:>4}  {d['stage']:<5}  {d['reason']:<14}  {d['f_before']:.3f}     {cand}")

    best = result.best
    print(f"\nval F1 {log.of('checkpoint')[0]['best_f1']:.3f} -> {best.metrics['val']['weighted_f1']:.3f}, "
          f"test F1 {best.metrics['test']['weighted_f1']:.3f}")
    print(f"planted statement recovered: {PLANTED_HEADER in best.scg_text}")
    print("\ngraph changes:")
    print(diff_scg(task.initial_graph(), parse_scg(best.scg_text)).render())
    print(f"\n{len(log.of('call'))} scripted calls in {elapsed:.2f}s")


if __name__ == "__main__":
    main()
