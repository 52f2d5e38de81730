"""Answer rate and abstention-aware overlap F1 of the QA stage across null thresholds.

    python scripts/threshold_sweep.py runs/e2e/run/config.tuned.yaml

Questions are teacher-forced on the dev split; only the abstainable
templates take part, as in tuning.
"""

import argparse
import sys

import numpy as np

from meascascade.config import load_config
from meascascade.metrics import span_counts
from meascascade.pipeline import load_stage, train_dev
from meascascade.spanqa import gold_instances, threshold_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--points", type=int, default=15)
    args = ap.parse_args()
    cfg = load_config(args.config)
    model = load_stage("qa", cfg)
    dev = train_dev(cfg)[1]
    insts = [i for d in dev for i in gold_instances(d, model.hyper) if not i.required]
    answers = model.answer(insts, tau=-np.inf)
    gaps = np.array([a["gap"] for a in answers])
    has_gold = np.array([i.answer is not None for i in insts])
    overlaps = np.array([span_counts([a["span"]], [i.answer]).overlap if i.answer else 0.0
                         for i, a in zip(insts, answers)])
    cands, f1 = threshold_curve(gaps, overlaps, has_gold)
    picks = np.unique(np.linspace(0, len(cands) - 1, args.points).round().astype(int))
    print(f"{len(insts)} abstainable questions, {int(has_gold.sum())} with a gold answer; "
          f"configured tau = {cfg.qa.tau:.4f}")
    print(f"{'tau':>10} {'answered':>9} {'F1':>7}")
    for k in picks:
        print(f"{cands[k]:10.4f} {int((gaps >= cands[k]).sum()):9d} {f1[k]:7.4f}")
    best = int(np.argmax(f1))
    print(f"best: tau={cands[best]:.4f} F1={f1[best]:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
