"""``meascascade`` command line.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 training diverged,
5 missing checkpoint. Logs go to stderr; reports go to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import pipeline
from .config import load_config
from .corpus import QUANTITY, load_corpus
from .errors import (
    ConfigError, CorpusError, DocumentSetMismatch, EmptyDevSet, InfeasibleSpec, MissingCheckpoint,
    TrainingDiverged,
)
from .metrics import report_json, report_table

log = logging.getLogger("meascascade")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4, 5


def _cmd_generate(args) -> int:
    cfg = load_config(args.config)
    for name in ("n_train", "n_dev", "n_test", "seed"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg.synth, name, value)
    summary = pipeline.generate_splits(args.out, cfg)
    if not summary["coverage_ok"]:
        log.warning("generated corpus misses the per-label/per-template minimum")
    log.info("wrote %s (train/dev/test + config.yaml)", args.out)
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    _, history = pipeline.train_stage(args.stage, cfg)
    log.info("%s: %d epoch records written to %s", args.stage, len(history), cfg.paths.checkpoints)
    return EXIT_OK


def _cmd_tune(args) -> int:
    cfg = load_config(args.config)
    tau, report = pipeline.tune_stage(cfg)
    src = Path(args.config)
    raw = yaml.safe_load(src.read_text()) or {}
    raw.setdefault("qa", {})["tau"] = tau
    out = Path(args.out) if args.out else src.with_name(src.stem + ".tuned.yaml")
    out.write_text(yaml.safe_dump(raw, sort_keys=True, allow_unicode=True))
    print(json.dumps(report, sort_keys=True))
    log.info("tau=%.6g written to %s", tau, out)
    return EXIT_OK


def _cmd_predict(args) -> int:
    cfg = load_config(args.config)
    models = pipeline.load_models(cfg)
    docs = pipeline.load_documents(args.inp)
    pred, debug = pipeline.predict_documents(docs, cfg, jobs=args.jobs, models=models)
    pipeline.write_predictions(pred, debug, args.out)
    log.info("predicted %d documents -> %s", len(pred), args.out)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    report = pipeline.evaluate_files(args.pred, args.gold)
    print(report_table(report))
    text = report_json(report)
    if args.json:
        Path(args.json).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _cmd_inspect(args) -> int:
    if args.corpus:
        corpus = load_corpus(args.corpus)
        kinds: dict = {}
        rels: dict = {}
        for d in corpus:
            for a in d.annotations:
                kinds[a.kind] = kinds.get(a.kind, 0) + 1
            for r in d.relations:
                rels[r.kind] = rels.get(r.kind, 0) + 1
        print(json.dumps({"documents": len(corpus), "annotations": kinds, "relations": rels,
                          "quantities_per_doc": kinds.get(QUANTITY, 0) / max(len(corpus), 1)},
                         sort_keys=True, indent=1))
    if args.config:
        cfg = load_config(args.config)
        ckpt = Path(cfg.paths.checkpoints)
        status = {s: (ckpt / f"{s}.mprm").is_file() for s in pipeline.STAGES}
        print(yaml.safe_dump({"config": cfg.to_dict(), "checkpoints": status}, sort_keys=True))
    if not (args.corpus or args.config):
        raise ConfigError("inspect needs --corpus and/or --config")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meascascade", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic train/dev/test corpus and config")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="base config (defaults to the scratch preset)")
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-dev", dest="n_dev", type=int)
    g.add_argument("--n-test", dest="n_test", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train one cascade stage on gold data")
    t.add_argument("--stage", required=True, choices=pipeline.STAGES)
    t.add_argument("--config", required=True)
    t.set_defaults(func=_cmd_train)

    pr = sub.add_parser("predict", help="run the full cascade over raw documents")
    pr.add_argument("--config", required=True)
    pr.add_argument("--in", dest="inp", required=True, help="directory of <docId>.txt files")
    pr.add_argument("--out", required=True, help="output TSV; texts and debug/ go beside it")
    pr.add_argument("--jobs", type=int, default=1)
    pr.set_defaults(func=_cmd_predict)

    e = sub.add_parser("evaluate", help="score predictions against gold")
    e.add_argument("--pred", required=True)
    e.add_argument("--gold", required=True)
    e.add_argument("--json", help="write the JSON report here instead of stdout")
    e.set_defaults(func=_cmd_evaluate)

    tt = sub.add_parser("tune-threshold", help="tune the QA null threshold on dev")
    tt.add_argument("--config", required=True)
    tt.add_argument("--out", help="tuned config path (default <config>.tuned.yaml)")
    tt.set_defaults(func=_cmd_tune)

    i = sub.add_parser("inspect", help="summarize a corpus and/or a resolved config")
    i.add_argument("--corpus")
    i.add_argument("--config")
    i.set_defaults(func=_cmd_inspect)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingCheckpoint as exc:
        log.error("missing checkpoint: %s", exc)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (FileNotFoundError, CorpusError, DocumentSetMismatch, EmptyDevSet, InfeasibleSpec) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
