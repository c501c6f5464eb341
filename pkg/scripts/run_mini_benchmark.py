"""Run the default mini benchmark end to end and print the headline tables.

    python scripts/run_mini_benchmark.py --out runs/mini
"""

import argparse
import csv
import sys
from pathlib import Path

from tapm.cli import main


def show(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    print()


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/mini"))
    ap.add_argument("--config", type=Path)
    ap.add_argument("--ablation", action="store_true", help="also run leave-one-group-out")
    args = ap.parse_args()
    common = ["--out", str(args.out)] + (["--config", str(args.config)] if args.config else [])
    code = main(["run"] + common)
    if code == 0 and args.ablation:
        code = main(["ablate", "leave-one-group-out"] + common)
    if code:
        sys.exit(code)
    for rel in ["eval/table1.csv", "eval/table2.csv", "game/summary.csv", "analysis/cosine.csv"]:
        print(f"== {rel}")
        show(args.out / rel)
    if args.ablation:
        print("== ablation/leave-one-group-out.csv")
        show(args.out / "ablation" / "leave-one-group-out.csv")
