"""Print the generation and editing rows of one or more run directories as a table.

Usage: python3 scripts/summarize.py runs/seed0 runs/seed1 ...
"""

import argparse
from pathlib import Path

from flowplan.experiments import read_report


def rows(run_dir: Path, stage: str):
    if not (run_dir / stage / "report.json").exists():
        return []
    return read_report(run_dir / stage)["rows"]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("runs", nargs="+", type=Path)
    args = parser.parse_args(argv)
    print(f"{'run':<12} {'row':<20} {'f1':>7} {'order':>7} {'fd':>8}")
    for run in args.runs:
        for r in rows(run, "eval-gen"):
            print(f"{run.name:<12} {r['model']:<20} {r['alignment_f1']:7.3f} {r['order_accuracy']:7.3f} {r['fd']:8.4f}")
        for r in rows(run, "eval-edit"):
            print(f"{run.name:<12} {'edit/' + r['row']:<20} {r['target_f1']:7.3f} {r['order_accuracy']:7.3f} {r['fd']:8.4f}")


if __name__ == "__main__":
    main()
