"""Print per-epoch dev metrics of a trained run as CSV.

    python scripts/train_curves.py runs/e2e/run [--stage quantity]
"""

import argparse
import csv
import sys

from meascascade.experiment import stage_history
from meascascade.pipeline import STAGES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run", help="directory holding checkpoints/")
    ap.add_argument("--stage", choices=STAGES, action="append")
    args = ap.parse_args()
    writer = csv.writer(sys.stdout)
    writer.writerow(["stage", "epoch", "metric", "value"])
    for stage in args.stage or STAGES:
        for rec in stage_history(args.run, stage):
            for key, value in sorted(rec.items()):
                if key != "epoch" and value is not None:
                    writer.writerow([stage, rec["epoch"], key, f"{value:.6f}"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
