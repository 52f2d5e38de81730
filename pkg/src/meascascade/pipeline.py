"""Stage orchestration shared by the command line and the experiment scripts."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .corpus import (
    QUANTITY, AnnotatedDoc, Annotation, Corpus, Document, QuantityDetail, load_corpus, write_tsv,
)
from .errors import MissingCheckpoint
from .metrics import score_corpus
from .quantity_tagger import QuantityTagger, make_item, split_dev, train_tagger
from .spanqa import QaModel, multi_turn_batch, train_qa, tune_threshold
from .synthgen import GrammarSpec, generate
from .unitmods import UnitModsModel, records_from_corpus, train_unitmods

log = logging.getLogger(__name__)

STAGES = ("quantity", "unitmods", "qa")
_MODEL_CLASSES = {"quantity": QuantityTagger, "unitmods": UnitModsModel, "qa": QaModel}

# documents per prediction group; groups are the unit of batching and of
# parallel work, so the number of workers never changes the arithmetic
GROUP_SIZE = 8


# ---------------------------------------------------------------- data

def train_dev(cfg: PipelineConfig) -> tuple[Corpus, Corpus]:
    """Training corpus and dev corpus (explicit, or a seeded split of train)."""
    if not cfg.paths.train:
        raise FileNotFoundError("paths.train is not set")
    train = load_corpus(cfg.paths.train)
    if cfg.paths.dev:
        return train, load_corpus(cfg.paths.dev)
    return split_dev(train, cfg.quantity.dev_fraction, cfg.seed)


def load_documents(location: str | Path) -> list[Document]:
    """Raw documents: the ``*.txt`` files of a directory (or of a TSV's directory).

    Annotations are never read, so gold data cannot leak into prediction.
    """
    location = Path(location)
    if not location.exists():
        raise FileNotFoundError(str(location))
    directory = location.parent if location.is_file() else location
    docs = []
    for p in sorted(directory.glob("*.txt")):
        with open(p, encoding="utf-8", newline="") as fh:
            docs.append(Document(p.stem, fh.read()))
    return docs


def generate_splits(out_dir: str | Path, cfg: PipelineConfig, spec: Optional[GrammarSpec] = None) -> dict:
    """Write ``train/``, ``dev/`` and ``test/`` corpora plus a ready-to-run config."""
    out_dir = Path(out_dir)
    s = cfg.synth
    spec = spec or GrammarSpec(seed=s.seed)
    corpus, report = generate(spec, s.n_train + s.n_dev + s.n_test)
    ids = corpus.doc_ids()
    parts = {"train": ids[:s.n_train], "dev": ids[s.n_train:s.n_train + s.n_dev],
             "test": ids[s.n_train + s.n_dev:]}
    for name, part in parts.items():
        write_tsv(corpus.subset(part), out_dir / name / "annotations.tsv")
    summary = asdict(report)
    summary["coverage_ok"] = report.coverage_ok()
    (out_dir / "generation_report.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    data = cfg.to_dict()
    data["paths"] = {"train": "train", "dev": "dev", "checkpoints": "checkpoints", "embeddings": None}
    import yaml
    (out_dir / "config.yaml").write_text(yaml.safe_dump(data, sort_keys=True, allow_unicode=True))
    return summary


# ---------------------------------------------------------------- training

def _write_log(path: Path, history: Sequence[dict]) -> None:
    # wall-clock fields stay out of the file so reruns are byte-identical
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            rec = {k: v for k, v in rec.items() if k != "seconds"}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train_stage(stage: str, cfg: PipelineConfig, train: Optional[Corpus] = None,
                dev: Optional[Corpus] = None) -> tuple[object, list]:
    """Train one stage on gold data and write ``<checkpoints>/<stage>.{mprm,json}`` plus a log."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if train is None:
        train, dev = train_dev(cfg)
    hyper = getattr(cfg, stage)
    if hyper.epochs == 0:
        log.warning("%s: epochs=0, saving the initialized model", stage)
    if stage == "quantity":
        model, history = train_tagger(train, dev, cfg.encoder, cfg.quantity)
    elif stage == "unitmods":
        dev_records = records_from_corpus(dev) if dev is not None else None
        model, history = train_unitmods(records_from_corpus(train), dev_records, cfg.unitmods)
    else:
        model, history = train_qa(train, dev, cfg.qa_encoder, cfg.qa)
    ckpt = Path(cfg.paths.checkpoints)
    ckpt.mkdir(parents=True, exist_ok=True)
    model.save(ckpt, stage)
    _write_log(ckpt / f"{stage}_log.jsonl", history)
    return model, history


def load_stage(stage: str, cfg: PipelineConfig):
    ckpt = Path(cfg.paths.checkpoints)
    for suffix in (".mprm", ".json"):
        if not (ckpt / f"{stage}{suffix}").is_file():
            raise MissingCheckpoint(str(ckpt / f"{stage}{suffix}"))
    return _MODEL_CLASSES[stage].load(ckpt, stage)


def tune_stage(cfg: PipelineConfig, dev: Optional[Corpus] = None) -> tuple[float, dict]:
    """Tune the QA null threshold on dev; the checkpoint itself is left untouched."""
    model = load_stage("qa", cfg)
    if dev is None:
        dev = train_dev(cfg)[1]
    return tune_threshold(model, dev)


# ---------------------------------------------------------------- prediction

def _round(x: float) -> float:
    return float(np.round(x, 6))


def predict_group(docs: Sequence[Document], tagger: QuantityTagger, unitmods: UnitModsModel,
                  qa: QaModel, max_len: int) -> list[tuple[AnnotatedDoc, dict]]:
    """Subtask 1, then 2, then 3-5 over one group of documents."""
    items = [make_item(d, max_len, with_gold=False) for d in docs]
    spans = tagger.predict_items(items)
    surfaces = [d.slice(s) for d, doc_spans in zip(docs, spans) for s in doc_spans]
    details = unitmods.predict(surfaces)
    quantities, k = [], 0
    for d, doc_spans in zip(docs, spans):
        qs = []
        for n, s in enumerate(doc_spans, start=1):
            unit, _, mods = details[k]
            k += 1
            labels = tuple(lbl for lbl in unitmods.labels if lbl in mods.labels)
            qs.append(Annotation(f"{d.doc_id}-T{n}", n, QUANTITY, s, d.slice(s), QuantityDetail(unit, labels)))
        quantities.append(qs)
    graphs = multi_turn_batch(list(zip(docs, quantities)), qa)
    out = []
    for d, item, qs, graph in zip(docs, items, quantities, graphs):
        debug = {
            "doc_id": d.doc_id, "n_tokens": item.n_total, "truncated": item.truncated,
            "quantities": [{"id": q.annot_id, "span": [q.span.start, q.span.end], "text": q.surface,
                            "unit": q.payload.unit, "mods": list(q.payload.mods)} for q in qs],
            "questions": [{k: (_round(v) if isinstance(v, float) else v) for k, v in rec.items()}
                          for rec in graph.debug],
        }
        out.append((graph.doc, debug))
    return out


_WORKER: dict = {}


def _worker_init(cfg_dict: dict, tau: float):
    from .config import from_dict
    cfg = from_dict(cfg_dict)
    _WORKER["models"] = load_models(cfg, tau)
    _WORKER["max_len"] = cfg.max_len


def _worker_run(docs):
    return predict_group(docs, *_WORKER["models"], _WORKER["max_len"])


def load_models(cfg: PipelineConfig, tau: Optional[float] = None):
    tagger, unitmods, qa = (load_stage(s, cfg) for s in STAGES)
    qa.scorer.tau = cfg.qa.tau if tau is None else tau
    return tagger, unitmods, qa


def predict_documents(docs: Sequence[Document], cfg: PipelineConfig, jobs: int = 1,
                      models=None) -> tuple[Corpus, dict]:
    """Full cascade over ``docs``; returns the predicted corpus and per-doc debug records."""
    docs = sorted(docs, key=lambda d: d.doc_id)
    models = models or load_models(cfg)
    groups = [docs[k:k + GROUP_SIZE] for k in range(0, len(docs), GROUP_SIZE)]
    if jobs > 1 and len(groups) > 1:
        cfg_dict = cfg.to_dict()
        with ProcessPoolExecutor(jobs, initializer=_worker_init,
                                 initargs=(cfg_dict, models[2].scorer.tau)) as pool:
            results = list(pool.map(_worker_run, groups))
    else:
        results = [predict_group(g, *models, cfg.max_len) for g in groups]
    pred, debug = [], {}
    for group in results:
        for doc, dbg in group:
            pred.append(doc)
            debug[doc.doc_id] = dbg
    return Corpus(pred), debug


def write_predictions(pred: Corpus, debug: dict, out_tsv: str | Path) -> Path:
    """TSV (plus texts) at ``out_tsv``; debug JSON per document under ``debug/`` beside it."""
    out_tsv = Path(out_tsv)
    write_tsv(pred, out_tsv)
    ddir = out_tsv.parent / "debug"
    ddir.mkdir(parents=True, exist_ok=True)
    for doc_id, rec in sorted(debug.items()):
        (ddir / f"{doc_id}.json").write_text(json.dumps(rec, sort_keys=True, indent=1, ensure_ascii=False),
                                             encoding="utf-8")
    return ddir


def evaluate_files(pred_path: str | Path, gold_path: str | Path) -> dict:
    """Score a predicted corpus against gold.

    When the predictions have a ``debug/`` directory beside them, each
    document's error attribution is merged into its debug JSON.
    """
    pred, gold = load_corpus(pred_path), load_corpus(gold_path)
    report = score_corpus(pred, gold)
    pred_path = Path(pred_path)
    ddir = (pred_path if pred_path.is_dir() else pred_path.parent) / "debug"
    if ddir.is_dir():
        for doc_id, errors in report["attribution"]["docs"].items():
            f = ddir / f"{doc_id}.json"
            if f.is_file():
                rec = json.loads(f.read_text(encoding="utf-8"))
                rec["errors"] = errors
                f.write_text(json.dumps(rec, sort_keys=True, indent=1, ensure_ascii=False), encoding="utf-8")
    return report
