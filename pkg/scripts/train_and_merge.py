#!/usr/bin/env python3
"""End-to-end walkthrough: train specialists on two synthetic tasks, merge
them, and evaluate the merged adapters on both tasks with each task's head.

Usage: python scripts/train_and_merge.py [out_dir]
"""
import sys
from pathlib import Path

from svdlora.cli import main

TASKS = [
    {"seed": 5, "classes": 2},
    {"seed": 6, "classes": 3},
]


def run(out_dir: str) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for t in TASKS:
        path = out / f"task{t['seed']}.mlgo"
        files.append(path)
        print(f"== training task seed {t['seed']} ==")
        code = main(["train", "--task-seed", str(t["seed"]),
                     "--classes", str(t["classes"]),
                     "--separation", "8.0", "--out", str(path)])
        if code:
            return code
    merged = out / "merged.mlgo"
    print("== merging ==")
    code = main(["merge", "--inputs", *map(str, files), "--out", str(merged),
                 "--report", str(out / "merge_report.json")])
    if code:
        return code
    for t, path in zip(TASKS, files):
        print(f"== merged model on task seed {t['seed']} ==")
        code = main(["eval", "--adapters", str(merged), "--head", str(path),
                     "--task-seed", str(t["seed"])])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run(sys.argv[1] if len(sys.argv) > 1 else "demo_out"))
