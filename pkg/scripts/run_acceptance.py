"""Run the acceptance criteria outside pytest and write acceptance.csv.

    python3 scripts/run_acceptance.py [--workdir accept_run] [--only 1,3,9]

Datasets and the trained checkpoint are cached in the work directory, so a
second run skips generation and training.
"""
import argparse
import sys
from pathlib import Path

from cbna.acceptance import CRITERIA, AcceptanceContext, run_criterion
from cbna.evaluation import write_csv


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--workdir", default="accept_run")
    p.add_argument("--only", help="comma-separated criterion numbers")
    args = p.parse_args()
    numbers = [int(n) for n in args.only.split(",")] if args.only else sorted(CRITERIA)
    ctx = AcceptanceContext(args.workdir)
    results = []
    for n in numbers:
        res = run_criterion(n, ctx)
        print(res.line(), flush=True)
        results.append(res)
    write_csv(Path(args.workdir) / "acceptance.csv", ("criterion", "name", "passed", "seconds", "detail"),
              [(r.number, r.name, r.passed, r.seconds, r.detail) for r in results])
    return 0 if all(r.passed for r in results) else 3


if __name__ == "__main__":
    sys.exit(main())
