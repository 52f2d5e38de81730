"""Span overlap scoring, greedy alignment and the five-subtask report."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import (
    ANNOTATION_KINDS, ENTITY, PROPERTY, QUALIFIER, QUANTITY, RELATION_KINDS, AnnotatedDoc,
    Corpus, Span,
)
from .errors import DocumentSetMismatch

SUBTASKS = ("quantity", "units_mods", "entity_property", "qualifier", "relations")
METRIC_FIELDS = ("precision", "recall", "f1", "exact_match", "overlap_f1")


def harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def overlap_f1(pred: Span, gold: Span) -> float:
    """Character-overlap F1 between two spans of the same document."""
    inter = pred.intersection(gold)
    if inter == 0:
        return 0.0
    return harmonic(inter / len(pred), inter / len(gold))


def align(preds: Sequence[Span], golds: Sequence[Span]) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by descending overlap F1.

    Ties go to the earlier gold start, then the earlier prediction. Returns
    ``(pred_index, gold_index, score)`` triples for overlapping pairs only.
    """
    cands = []
    for pi, p in enumerate(preds):
        for gi, g in enumerate(golds):
            s = overlap_f1(p, g)
            if s > 0:
                cands.append((-s, g.start, g.end, p.start, p.end, gi, pi, s))
    cands.sort()
    used_p, used_g, out = set(), set(), []
    for *_, gi, pi, s in cands:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        out.append((pi, gi, s))
    return out


def _ratio(num: float, den: float, both_empty: bool) -> float:
    if both_empty:
        return 1.0
    return num / den if den else 0.0


@dataclass
class SpanCounts:
    n_pred: int = 0
    n_gold: int = 0
    matched: int = 0
    exact: int = 0
    overlap: float = 0.0

    def add(self, other: "SpanCounts") -> "SpanCounts":
        return SpanCounts(self.n_pred + other.n_pred, self.n_gold + other.n_gold,
                          self.matched + other.matched, self.exact + other.exact,
                          self.overlap + other.overlap)

    def scores(self) -> dict:
        empty = self.n_pred == 0 and self.n_gold == 0
        p = _ratio(self.matched, self.n_pred, empty)
        r = _ratio(self.matched, self.n_gold, empty)
        op = _ratio(self.overlap, self.n_pred, empty)
        orc = _ratio(self.overlap, self.n_gold, empty)
        return {
            "precision": p, "recall": r, "f1": harmonic(p, r),
            "exact_match": _ratio(self.exact, self.n_gold, empty),
            "overlap_precision": op, "overlap_recall": orc, "overlap_f1": harmonic(op, orc),
        }


def span_counts(preds: Sequence[Span], golds: Sequence[Span]) -> SpanCounts:
    pairs = align(preds, golds)
    return SpanCounts(
        n_pred=len(preds), n_gold=len(golds), matched=len(pairs),
        exact=sum(1 for pi, gi, _ in pairs if preds[pi] == golds[gi]),
        overlap=sum(s for _, _, s in pairs),
    )


def span_f1(preds: Sequence[Span], golds: Sequence[Span]) -> float:
    """Overlap F1 of one prediction list against one gold list."""
    return span_counts(preds, golds).scores()["overlap_f1"]


@dataclass
class DocCounts:
    kinds: dict = field(default_factory=lambda: {k: SpanCounts() for k in ANNOTATION_KINDS})
    unit_correct: int = 0
    mods_tp: int = 0
    mods_pred: int = 0
    mods_gold: int = 0
    q_exact_detail: int = 0
    rel_pred: dict = field(default_factory=lambda: {k: 0 for k in RELATION_KINDS})
    rel_gold: dict = field(default_factory=lambda: {k: 0 for k in RELATION_KINDS})
    rel_tp: dict = field(default_factory=lambda: {k: 0 for k in RELATION_KINDS})
    rel_exact: int = 0

    def add(self, o: "DocCounts") -> "DocCounts":
        out = DocCounts()
        out.kinds = {k: self.kinds[k].add(o.kinds[k]) for k in ANNOTATION_KINDS}
        for name in ("unit_correct", "mods_tp", "mods_pred", "mods_gold", "q_exact_detail",
                     "rel_exact"):
            setattr(out, name, getattr(self, name) + getattr(o, name))
        for name in ("rel_pred", "rel_gold", "rel_tp"):
            a, b = getattr(self, name), getattr(o, name)
            setattr(out, name, {k: a[k] + b[k] for k in RELATION_KINDS})
        return out


def _doc_alignment(pred: AnnotatedDoc, gold: AnnotatedDoc):
    """Per kind alignment; returns counts and the pred-id -> gold-id map."""
    counts = {}
    mapping = {}
    exact_ids = set()
    for kind in ANNOTATION_KINDS:
        ps, gs = pred.of_kind(kind), gold.of_kind(kind)
        pairs = align([a.span for a in ps], [a.span for a in gs])
        counts[kind] = SpanCounts(len(ps), len(gs), len(pairs),
                                  sum(1 for pi, gi, _ in pairs if ps[pi].span == gs[gi].span),
                                  sum(s for _, _, s in pairs))
        for pi, gi, _ in pairs:
            mapping[ps[pi].annot_id] = gs[gi].annot_id
            if ps[pi].span == gs[gi].span:
                exact_ids.add(gs[gi].annot_id)
    return counts, mapping, exact_ids


def doc_counts(pred: AnnotatedDoc, gold: AnnotatedDoc) -> DocCounts:
    out = DocCounts()
    out.kinds, mapping, exact_ids = _doc_alignment(pred, gold)
    gold_by_id = gold.by_id()
    for p in pred.of_kind(QUANTITY):
        pm = set(p.payload.mods) if p.payload else set()
        out.mods_pred += len(pm)
        if p.annot_id in mapping:
            g = gold_by_id[mapping[p.annot_id]]
            gm = set(g.payload.mods) if g.payload else set()
            pu = p.payload.unit if p.payload else None
            gu = g.payload.unit if g.payload else None
            out.unit_correct += pu == gu
            out.mods_tp += len(pm & gm)
            out.q_exact_detail += (pu == gu and pm == gm)
    for g in gold.of_kind(QUANTITY):
        out.mods_gold += len(g.payload.mods) if g.payload else 0
    gold_rels = {(r.kind, r.source, r.target) for r in gold.relations}
    for r in gold.relations:
        out.rel_gold[r.kind] += 1
    seen = set()
    for r in pred.relations:
        out.rel_pred[r.kind] += 1
        key = (r.kind, mapping.get(r.source), mapping.get(r.target))
        if key in gold_rels and key not in seen:
            seen.add(key)
            out.rel_tp[r.kind] += 1
            if key[1] in exact_ids and key[2] in exact_ids:
                out.rel_exact += 1
    return out


def _prf(tp, n_pred, n_gold) -> dict:
    empty = n_pred == 0 and n_gold == 0
    p, r = _ratio(tp, n_pred, empty), _ratio(tp, n_gold, empty)
    return {"precision": p, "recall": r, "f1": harmonic(p, r)}


def summarize(c: DocCounts) -> dict:
    """Turn pooled counts into per-kind, per-relation and per-subtask scores."""
    kinds = {k: c.kinds[k].scores() for k in ANNOTATION_KINDS}
    nq_pred, nq_gold = c.kinds[QUANTITY].n_pred, c.kinds[QUANTITY].n_gold
    unit = _prf(c.unit_correct, nq_pred, nq_gold)
    mods = _prf(c.mods_tp, c.mods_pred, c.mods_gold)
    rels = {k: _prf(c.rel_tp[k], c.rel_pred[k], c.rel_gold[k]) for k in RELATION_KINDS}
    rel_all = _prf(sum(c.rel_tp.values()), sum(c.rel_pred.values()), sum(c.rel_gold.values()))
    n_rel_gold = sum(c.rel_gold.values())
    rel_all["exact_match"] = _ratio(c.rel_exact, n_rel_gold, n_rel_gold == 0 and not sum(c.rel_pred.values()))
    rel_all["overlap_f1"] = rel_all["f1"]

    um = {m: (unit[m] + mods[m]) / 2 for m in ("precision", "recall", "f1")}
    um["exact_match"] = _ratio(c.q_exact_detail, nq_gold, nq_gold == 0 and nq_pred == 0)
    um["overlap_f1"] = um["f1"]

    ep = c.kinds[ENTITY].add(c.kinds[PROPERTY]).scores()
    subtasks = {
        "quantity": kinds[QUANTITY],
        "units_mods": um,
        "entity_property": ep,
        "qualifier": kinds[QUALIFIER],
        "relations": rel_all,
    }
    subtasks = {name: {m: s[m] for m in METRIC_FIELDS} for name, s in subtasks.items()}
    global_ = {m: sum(subtasks[s][m] for s in SUBTASKS) / len(SUBTASKS) for m in METRIC_FIELDS}
    return {
        "kinds": kinds,
        "unit": unit,
        "mods": mods,
        "relations": rels,
        "subtasks": subtasks,
        "global": global_,
    }


def score_corpus(pred: Corpus, gold: Corpus) -> dict:
    """Score a predicted corpus against gold; returns the JSON-ready report."""
    pred_ids, gold_ids = set(pred.doc_ids()), set(gold.doc_ids())
    if pred_ids != gold_ids:
        missing = sorted(gold_ids - pred_ids)[:5]
        extra = sorted(pred_ids - gold_ids)[:5]
        raise DocumentSetMismatch(f"document sets differ (missing {missing}, extra {extra})")
    pred_map = {d.doc_id: d for d in pred}
    total = DocCounts()
    per_doc = {}
    for g in sorted(gold, key=lambda d: d.doc_id):
        c = doc_counts(pred_map[g.doc_id], g)
        per_doc[g.doc_id] = summarize(c)["global"]["overlap_f1"]
        total = total.add(c)
    report = summarize(total)
    report["global"]["doc_macro_overlap_f1"] = (
        sum(per_doc.values()) / len(per_doc) if per_doc else 1.0)
    report["n_docs"] = len(gold_ids)
    report["attribution"] = attribute_errors(pred, gold)
    return report


def attribute_errors(pred: Corpus, gold: Corpus) -> dict:
    """Assign each gold miss to the earliest cascade stage that caused it."""
    pred_map = {d.doc_id: d for d in pred}
    totals = defaultdict(int)
    docs = {}
    for g in sorted(gold, key=lambda d: d.doc_id):
        p = pred_map[g.doc_id]
        _, mapping, _ = _doc_alignment(p, g)
        aligned_gold = set(mapping.values())
        inverse = {v: k for k, v in mapping.items()}
        p_by_id = p.by_id()
        pred_rels = {(r.kind, mapping.get(r.source), mapping.get(r.target)) for r in p.relations}
        doc = defaultdict(int)
        quantity_missed = set()
        for q in g.of_kind(QUANTITY):
            if q.annot_id not in aligned_gold:
                doc["quantity_missed"] += 1
                quantity_missed.add(q.annot_set)
                continue
            pq = p_by_id[inverse[q.annot_id]]
            if pq.span != q.span:
                doc["quantity_partial"] += 1
            gp, pp = q.payload or None, pq.payload or None
            if (gp.unit if gp else None) != (pp.unit if pp else None):
                doc["unit_wrong"] += 1
            if set(gp.mods if gp else ()) != set(pp.mods if pp else ()):
                doc["mods_wrong"] += 1
        for a in g.annotations:
            if a.kind == QUANTITY or a.annot_id in aligned_gold:
                continue
            stage = "cascade_from_quantity" if a.annot_set in quantity_missed else "qa_missed"
            doc[f"{a.kind}_{stage}"] += 1
        for r in g.relations:
            if (r.kind, r.source, r.target) in pred_rels:
                continue
            src_set = g.by_id()[r.source].annot_set
            stage = "cascade_from_quantity" if src_set in quantity_missed else "qa_missed"
            doc[f"relation_{stage}"] += 1
        doc["spurious_quantities"] = len(p.of_kind(QUANTITY)) - sum(
            1 for pid in mapping if p_by_id[pid].kind == QUANTITY)
        for k, v in doc.items():
            totals[k] += v
        docs[g.doc_id] = dict(sorted(doc.items()))
    return {"totals": dict(sorted(totals.items())), "docs": docs}


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


def report_table(report: dict) -> str:
    """Fixed-width table: one row per subtask plus the global average."""
    header = f"{'subtask':<18}{'P':>8}{'R':>8}{'F1':>8}{'EM':>8}{'OvF1':>8}"
    lines = [header, "-" * len(header)]
    rows = [(name, report["subtasks"][name]) for name in SUBTASKS]
    rows.append(("global", report["global"]))
    for name, s in rows:
        lines.append(f"{name:<18}" + "".join(f"{100 * s[m]:>8.2f}" for m in METRIC_FIELDS))
    return "\n".join(lines)
