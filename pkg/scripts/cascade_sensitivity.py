"""How much of the QA error is inherited from the quantity stage.

    python scripts/cascade_sensitivity.py runs/e2e/run/config.tuned.yaml [--split test]

Scores entity/property/qualifier extraction twice on the same documents:
once starting from gold quantities, once from the tagger's predictions.
"""

import argparse
import json
import sys
from pathlib import Path

from meascascade.config import load_config
from meascascade.corpus import QUANTITY, Corpus, load_corpus
from meascascade.metrics import score_corpus
from meascascade.pipeline import load_models, predict_documents
from meascascade.spanqa import multi_turn_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--split", default="test", help="directory beside the config holding gold data")
    args = ap.parse_args()
    cfg = load_config(args.config)
    gold = load_corpus(Path(args.config).resolve().parent / args.split)
    models = load_models(cfg)

    graphs = multi_turn_batch([(d, d.of_kind(QUANTITY)) for d in gold], models[2])
    from_gold = score_corpus(Corpus([g.doc for g in graphs]), gold)
    predicted, _ = predict_documents([d.document for d in gold], cfg, models=models)
    cascade = score_corpus(predicted, gold)
    rows = {}
    for name in ("quantity", "entity_property", "qualifier", "relations"):
        rows[name] = {"gold_quantities": round(from_gold["subtasks"][name]["overlap_f1"], 4),
                      "predicted_quantities": round(cascade["subtasks"][name]["overlap_f1"], 4)}
    print(json.dumps(rows, indent=1))
    print(json.dumps({"attribution": cascade["attribution"]["totals"]}, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
