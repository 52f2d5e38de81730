"""Run generate -> train x3 -> tune-threshold -> predict -> evaluate and print timings.

    python scripts/run_e2e.py --workdir runs/e2e [--repeat] [--jobs 2]

With --repeat a second run goes into <workdir>_repeat and the checkpoints,
predictions and report are compared byte for byte.
"""

import argparse
import json
import sys
from pathlib import Path

import yaml

from meascascade.experiment import digest_tree, end_to_end
from meascascade.metrics import report_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/e2e")
    ap.add_argument("--base", help="YAML layered over the scratch preset")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--repeat", action="store_true")
    args = ap.parse_args()
    base = yaml.safe_load(Path(args.base).read_text()) if args.base else None

    res = end_to_end(args.workdir, base, args.jobs)
    print(report_table(res["report"]))
    print(json.dumps({k: round(v, 1) for k, v in res["times"].items()}, indent=1))
    if not args.repeat:
        return 0
    again = end_to_end(str(Path(args.workdir)) + "_repeat", base, args.jobs)
    same = {
        "checkpoints": digest_tree(res["run"] / "checkpoints") == digest_tree(again["run"] / "checkpoints"),
        "predictions": digest_tree(res["pred"]) == digest_tree(again["pred"]),
        "report": res["report_path"].read_bytes() == again["report_path"].read_bytes(),
    }
    print("byte-identical:", json.dumps(same))
    return 0 if all(same.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
