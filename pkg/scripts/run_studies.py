"""Ablation and graph-completeness tables on a task, through the CLI.

Defaults run the planted task offline; point --task at a real task and pass
--backend live --endpoint URL (key in EGO_API_KEY_<ALIAS>) for model runs.

    python scripts/run_studies.py [--task DIR] [--steps 4] [--repeats 2] [--out runs]
"""

from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

from scgprompt.cli import main as cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--task", help="task directory (default: a fresh planted task)")
    ap.add_argument("--steps", default="4")
    ap.add_argument("--repeats", default="2")
    ap.add_argument("--seed", default="0")
    ap.add_argument("--val-n", default="30")
    ap.add_argument("--test-n", default="30")
    ap.add_argument("--out", default="runs")
    args, backend = ap.parse_known_args()

    task = args.task
    if task is None:
        task = str(Path(tempfile.mkdtemp(prefix="planted-")) / "planted")
        code = cli(["init-task", "--example", "planted", "--out", task,
                    "--val-n", args.val_n, "--test-n", args.test_n])
        if code:
            return code
    common = ["--task", task, "--steps", args.steps, "--repeats", args.repeats, "--seed", args.seed,
              "--val-n", args.val_n, "--test-n", args.test_n, "--out", args.out, *backend]
    for verb in ("ablate", "completeness"):
        print(f"\n== {verb} ==")
        code = cli([verb, *common])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
