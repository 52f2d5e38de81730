"""Multi-turn extractive QA for entities, properties, qualifiers and their relations.

Each question is encoded together with the passage as
``<null> <q> question <sep> passage``; position 0 stands in for a CLS token.
A start vector ``S`` and end vector ``E`` score every position and the best
``i <= j`` span competes against the null score ``T_0.S + T_0.E`` plus a
tuned threshold.
"""

from __future__ import annotations

import json
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .corpus import (
    ENTITY, HAS_PROPERTY, HAS_QUANTITY, PROPERTY, QUALIFIER, QUALIFIES, QUANTITY,
    AnnotatedDoc, Annotation, Corpus, Document, Relation, Span, Token, tokenize, validate_doc,
)
from .encoder import PAD, UNK, EncoderConfig, TokenEncoder, Vocab, normalize_word
from .errors import ArityMismatch, DimensionMismatch, EmptyDevSet, IllegalRelation, TrainingDiverged
from .metrics import SpanCounts, span_counts
from .netcore import Adam, Param, assign_params, load_params, log_softmax, logsumexp, save_params, \
    snapshot, uniform_init
from .quantity_tagger import split_dev

log = logging.getLogger(__name__)

NULL, QMARK, SEP = "<null>", "<q>", "<sep>"
SLOT = "___"


@dataclass(frozen=True)
class QuestionTemplate:
    id: int
    relation: str
    pattern: str
    roles: tuple
    answer_kind: str
    required: bool

    @property
    def slots(self) -> int:
        return self.pattern.count(SLOT)


TEMPLATES = {t.id: t for t in (
    QuestionTemplate(1, HAS_QUANTITY, "What is the measured property of the quantity ___?",
                     (QUANTITY,), PROPERTY, False),
    QuestionTemplate(2, HAS_PROPERTY, "What is the measured entity that has the measured property "
                     "___ of the quantity ___?", (PROPERTY, QUANTITY), ENTITY, True),
    QuestionTemplate(3, HAS_QUANTITY, "What is the measured entity that has the quantity ___?",
                     (QUANTITY,), ENTITY, True),
    QuestionTemplate(4, QUALIFIES, "What is the qualifier corresponding to the quantity ___?",
                     (QUANTITY,), QUALIFIER, False),
    QuestionTemplate(5, QUALIFIES, "What is the qualifier corresponding to the measured entity ___?",
                     (ENTITY,), QUALIFIER, False),
    QuestionTemplate(6, QUALIFIES, "What is the qualifier corresponding to the measured property ___?",
                     (PROPERTY,), QUALIFIER, False),
)}
ABSTAINABLE = tuple(t.id for t in TEMPLATES.values() if not t.required)

# per-position input features: passage flag, two slot-occurrence flags, template one-hot
N_FEATURES = 3 + len(TEMPLATES)


def fill_template(template: QuestionTemplate | int, *args: str) -> str:
    t = TEMPLATES[template] if isinstance(template, int) else template
    if len(args) != t.slots or any(not a for a in args):
        raise ArityMismatch(f"template {t.id} takes {t.slots} non-empty argument(s), got {args!r}")
    parts = t.pattern.split(SLOT)
    return "".join(p + a for p, a in zip(parts, args)) + parts[-1]


# ---------------------------------------------------------------- scoring

@dataclass
class QaHyper:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 23
    max_len: int = 512
    max_answer_len: int = 30
    # passage = tokens within this many positions of the quantity; None keeps the whole document
    context_window: Optional[int] = None
    dev_fraction: float = 0.1
    clip_norm: float = 5.0
    tau: float = 0.0


class SpanScorer:
    def __init__(self, dim: int, rng: np.random.Generator, name: str = "qa/scorer"):
        self.S = Param(f"{name}/S", uniform_init(rng, (dim,), dim))
        self.E = Param(f"{name}/E", uniform_init(rng, (dim,), dim))
        self.tau = 0.0

    def params(self):
        return [self.S, self.E]


def span_logits(T, scorer: SpanScorer):
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] < 1 or T.shape[1] != scorer.S.value.shape[0]:
        raise DimensionMismatch(f"encoded shape {T.shape} does not fit scorer dim {scorer.S.value.shape}")
    return T @ scorer.S.value, T @ scorer.E.value


def score_spans(T, scorer: SpanScorer):
    """``(start log-probs, end log-probs, s_null)`` with ``s_null = T_0.S + T_0.E``."""
    s, e = span_logits(T, scorer)
    return log_softmax(s), log_softmax(e), float(s[0] + e[0])


def best_span(start, end, passage: tuple[int, int], s_null: Optional[float] = None, tau: float = 0.0,
              required: bool = False, max_len: int = 30, return_score: bool = False):
    """Best ``(i, j)`` (inclusive) inside ``passage`` maximizing ``start[i] + end[j]``.

    Abstains (``None``) iff the question may go unanswered and
    ``s_null + tau > best``. Ties go to the smaller ``i``, then smaller ``j``.
    """
    p0, p1 = passage
    if p1 <= p0:
        raise ValueError("passage range is empty")
    s = np.asarray(start, dtype=float)[p0:p1]
    e = np.asarray(end, dtype=float)[p0:p1]
    n = len(s)
    width = min(max_len, n)
    ends = np.arange(n)[:, None] + np.arange(width)[None, :]
    cand = np.where(ends < n, s[:, None] + e[np.minimum(ends, n - 1)], -np.inf)
    flat = int(np.argmax(cand))
    i, k = divmod(flat, width)
    score = float(cand[i, k])
    span = (p0 + i, p0 + i + k)
    if not required and s_null is not None and s_null + tau > score:
        span = None
    return (span, score) if return_score else span


# ---------------------------------------------------------------- instances

@dataclass
class QaInstance:
    doc_id: str
    template: int
    args: tuple
    question: list
    passage: list
    required: bool
    anchor: Span
    set_id: int = 0
    answer: Optional[Span] = None          # gold char span, training only
    truncated: bool = False

    @property
    def offset(self) -> int:
        return 3 + len(self.question)

    @property
    def text(self) -> str:
        return fill_template(self.template, *self.args)

    def answer_tokens(self) -> Optional[tuple[int, int]]:
        """Gold answer as inclusive passage token indices; None if absent or cut off."""
        if self.answer is None:
            return None
        hit = [k for k, t in enumerate(self.passage) if t.span.overlaps(self.answer)]
        return (hit[0], hit[-1]) if hit else None

    def words(self) -> list[str]:
        return [NULL, QMARK] + [t.surface for t in self.question] + [SEP] + [t.surface for t in self.passage]

    def features(self) -> np.ndarray:
        n = self.offset + len(self.passage)
        f = np.zeros((n, N_FEATURES))
        f[self.offset:, 0] = 1.0
        norm = [normalize_word(t.surface) for t in self.passage]
        for col, arg in zip((1, 2), self.args):
            pattern = [normalize_word(t.surface) for t in tokenize(arg)]
            m = len(pattern)
            for k in range(len(norm) - m + 1):
                if norm[k:k + m] == pattern:
                    f[self.offset + k:self.offset + k + m, col] = 1.0
        f[:, 3 + self.template - 1] = 1.0
        return f


def make_instance(doc_id: str, tokens: Sequence[Token], template: int, args: Sequence[str],
                  anchor: Span, hyper: QaHyper, set_id=0, answer: Optional[Span] = None) -> QaInstance:
    t = TEMPLATES[template]
    question = tokenize(fill_template(t, *args))
    budget = hyper.max_len - 3 - len(question)
    if budget < 1:
        raise DimensionMismatch(f"question of {len(question)} tokens leaves no room for the passage")
    lo, hi = 0, len(tokens)
    if hyper.context_window is not None and tokens:
        inside = [k for k, tok in enumerate(tokens) if tok.span.end > anchor.start
                  and tok.span.start < anchor.end] or [0]
        lo = max(0, inside[0] - hyper.context_window)
        hi = min(len(tokens), inside[-1] + 1 + hyper.context_window)
    passage = list(tokens[lo:hi])
    truncated = len(passage) > budget
    passage = passage[:budget]
    if not passage:
        raise DimensionMismatch(f"{doc_id}: empty passage")
    return QaInstance(doc_id, template, tuple(args), question, passage, t.required, anchor, set_id,
                      answer, truncated)


def _nearest(cands: Iterable[Annotation], anchor: Span) -> Optional[Annotation]:
    cands = list(cands)
    if not cands:
        return None
    return min(cands, key=lambda a: (abs(a.span.start - anchor.start), a.span.start))


def gold_chain(doc: AnnotatedDoc):
    """Per quantity: ``(quantity, property, entity, {target_id: qualifier})`` from gold edges."""
    ids = doc.by_id()
    incoming = defaultdict(list)
    for r in doc.relations:
        incoming[r.target].append(r)

    def sources(target: Annotation, rel: str, kind: str):
        return [ids[r.source] for r in incoming[target.annot_id]
                if r.kind == rel and r.source in ids and ids[r.source].kind == kind]

    for q in doc.of_kind(QUANTITY):
        prop = _nearest(sources(q, HAS_QUANTITY, PROPERTY), q.span)
        if prop is not None:
            ent = _nearest(sources(prop, HAS_PROPERTY, ENTITY), q.span)
        else:
            ent = _nearest(sources(q, HAS_QUANTITY, ENTITY), q.span)
        quals = {}
        for target in (q, ent, prop):
            if target is not None:
                quals[target.annot_id] = _nearest(sources(target, QUALIFIES, QUALIFIER), q.span)
        yield q, prop, ent, quals


def gold_instances(doc: AnnotatedDoc, hyper: QaHyper, tokens=None) -> list[QaInstance]:
    """Teacher-forced questions of the six templates, with no-answer cases."""
    tokens = tokenize(doc.document) if tokens is None else tokens
    if not tokens:
        return []
    out = []

    def add(template, args, anchor, set_id, answer):
        inst = make_instance(doc.doc_id, tokens, template, args, anchor, hyper, set_id,
                             answer.span if answer is not None else None)
        if inst.required and inst.answer_tokens() is None:
            return
        if not inst.required and inst.answer is not None and inst.answer_tokens() is None:
            inst.answer = None           # answer fell outside the passage
        out.append(inst)

    for q, prop, ent, quals in gold_chain(doc):
        add(1, (q.surface,), q.span, q.annot_set, prop)
        if prop is not None:
            add(2, (prop.surface, q.surface), q.span, q.annot_set, ent)
        else:
            add(3, (q.surface,), q.span, q.annot_set, ent)
        add(4, (q.surface,), q.span, q.annot_set, quals.get(q.annot_id))
        if ent is not None:
            add(5, (ent.surface,), q.span, q.annot_set, quals.get(ent.annot_id))
        if prop is not None:
            add(6, (prop.surface,), q.span, q.annot_set, quals.get(prop.annot_id))
    return out


# ---------------------------------------------------------------- model

class QaModel:
    def __init__(self, enc_cfg: EncoderConfig, words: Vocab, chars: Vocab, hyper: QaHyper,
                 rng: np.random.Generator):
        self.enc_cfg, self.hyper = enc_cfg, hyper
        self.encoder = TokenEncoder(enc_cfg, words, chars, rng, extra_dim=N_FEATURES, name="qa/enc")
        self.scorer = SpanScorer(self.encoder.output_dim, rng)
        self.scorer.tau = hyper.tau

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, instances: Sequence[QaInstance], hyper: QaHyper):
        if enc_cfg.kind != "bilstm":
            raise ValueError("the QA stage needs the trainable encoder (question tokens have no "
                             "precomputed vectors)")
        seqs = [inst.words() for inst in instances]
        words = Vocab.build(([normalize_word(w) for w in s] for s in seqs), enc_cfg.min_word_count,
                            specials=(PAD, UNK, NULL, QMARK, SEP))
        chars = Vocab.build((c for w in s for c in w) for s in seqs)
        return cls(enc_cfg, words, chars, hyper, np.random.default_rng(hyper.seed))

    def params(self):
        return self.encoder.params() + self.scorer.params()

    def forward(self, instances: Sequence[QaInstance], rng=None):
        seqs = [inst.words() for inst in instances]
        steps = max(len(s) for s in seqs)
        extra = np.zeros((len(seqs), steps, N_FEATURES))
        for b, inst in enumerate(instances):
            f = inst.features()
            extra[b, :len(f)] = f
        T, lengths, cache = self.encoder.forward(seqs, extra, rng)
        return T @ self.scorer.S.value, T @ self.scorer.E.value, lengths, (T, cache)

    def loss(self, instances: Sequence[QaInstance], rng=None, backward=True) -> float:
        """Mean over the batch of start plus end cross-entropy; no-answer targets position 0."""
        s, e, lengths, (T, cache) = self.forward(instances, rng)
        n, steps = s.shape
        valid = np.arange(steps)[None, :] < lengths[:, None]
        tgt = np.zeros((2, n), dtype=np.int64)
        for b, inst in enumerate(instances):
            ans = inst.answer_tokens()
            if ans is not None:
                tgt[:, b] = ans[0] + inst.offset, ans[1] + inst.offset
        total = 0.0
        grads = []
        rows = np.arange(n)
        for logits, target in ((s, tgt[0]), (e, tgt[1])):
            z = np.where(valid, logits, -np.inf)
            lse = logsumexp(z, axis=1)
            total += float(np.sum(lse - z[rows, target]))
            g = np.exp(z - lse[:, None])
            g[rows, target] -= 1.0
            grads.append(g / n)
        if backward:
            ds, de = grads
            S, E = self.scorer.S, self.scorer.E
            S.grad += np.einsum("bt,btd->d", ds, T)
            E.grad += np.einsum("bt,btd->d", de, T)
            self.encoder.backward(ds[..., None] * S.value + de[..., None] * E.value, cache)
        return total / n

    def answer(self, instances: Sequence[QaInstance], tau: Optional[float] = None,
               batch_size: int = 32) -> list[dict]:
        """Decode each instance: char span (or None), best sum, s_null, token span."""
        tau = self.scorer.tau if tau is None else tau
        out = [None] * len(instances)
        # same-document questions share most word types, which keeps the char encoder cheap
        first = {}
        for inst in instances:
            first.setdefault(inst.doc_id, len(first))
        order = sorted(range(len(instances)),
                       key=lambda i: (first[instances[i].doc_id], len(instances[i].words())))
        for k in range(0, len(order), batch_size):
            idx = order[k:k + batch_size]
            s, e, lengths, _ = self.forward([instances[i] for i in idx])
            for b, i in enumerate(idx):
                inst = instances[i]
                n = lengths[b]
                s_null = float(s[b, 0] + e[b, 0])
                span, best = best_span(s[b, :n], e[b, :n], (inst.offset, n), s_null, tau,
                                       inst.required, self.hyper.max_answer_len, return_score=True)
                char = None
                if span is not None:
                    a, z = span[0] - inst.offset, span[1] - inst.offset
                    char = Span(inst.passage[a].span.start, inst.passage[z].span.end)
                out[i] = {"span": char, "tokens": span, "best": best, "s_null": s_null,
                          "gap": best - s_null}
        return out

    def save(self, directory: str | Path, prefix="qa"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_params(directory / f"{prefix}.mprm", self.params())
        hyper = asdict(self.hyper)
        hyper["tau"] = float(self.scorer.tau)
        meta = {"encoder": asdict(self.enc_cfg), "hyper": hyper, "words": self.encoder.words.itos,
                "chars": self.encoder.chars.itos}
        (directory / f"{prefix}.json").write_text(json.dumps(meta, sort_keys=True, ensure_ascii=False))

    @classmethod
    def load(cls, directory: str | Path, prefix="qa") -> "QaModel":
        directory = Path(directory)
        meta = json.loads((directory / f"{prefix}.json").read_text())
        model = cls(EncoderConfig(**meta["encoder"]), Vocab(meta["words"]), Vocab(meta["chars"]),
                    QaHyper(**meta["hyper"]), np.random.default_rng(0))
        assign_params(model.params(), load_params(directory / f"{prefix}.mprm"))
        return model


# ---------------------------------------------------------------- multi-turn inference

@dataclass
class RelationGraph:
    doc: AnnotatedDoc
    debug: list = field(default_factory=list)


def validate_graph(doc: AnnotatedDoc) -> None:
    """Structural checks on a predicted graph; raises IllegalRelation."""
    validate_doc(doc)
    ids = doc.by_id()
    out = defaultdict(list)
    for r in doc.relations:
        out[r.source].append(r)
    for a in doc.annotations:
        edges = out[a.annot_id]
        if a.kind == PROPERTY and [r.kind for r in edges] != [HAS_QUANTITY]:
            raise IllegalRelation(f"{doc.doc_id}/{a.annot_id}: property needs exactly one HasQuantity edge")
        if a.kind == ENTITY and (len(edges) != 1 or edges[0].kind not in (HAS_PROPERTY, HAS_QUANTITY)):
            raise IllegalRelation(f"{doc.doc_id}/{a.annot_id}: entity needs exactly one outgoing edge")
        if a.kind == QUALIFIER and any(r.kind != QUALIFIES for r in edges):
            raise IllegalRelation(f"{doc.doc_id}/{a.annot_id}: qualifier may only qualify")
    state = {}

    def visit(node):
        state[node] = 1
        for r in out[node]:
            if state.get(r.target) == 1:
                raise IllegalRelation(f"{doc.doc_id}: relation cycle through {node}")
            if r.target not in state:
                visit(r.target)
        state[node] = 2

    for node in ids:
        if node not in state:
            visit(node)


class _DocTurns:
    """Mutable per-document state while the stages run."""

    def __init__(self, doc: Document, quantities: Sequence[Annotation]):
        self.doc = doc
        self.tokens = tokenize(doc) if doc.text.strip() else []
        self.quantities = list(quantities)
        self.prop: dict = {}
        self.ent: dict = {}
        self.quals: dict = defaultdict(list)     # quantity id -> [(Span, target role)]
        self.debug: list = []

    def instance(self, template, args, q, hyper):
        return make_instance(self.doc.doc_id, self.tokens, template, args, q.span, hyper, q.annot_set)

    def surface(self, span: Span) -> str:
        return self.doc.slice(span)


def _ask(model: QaModel, jobs, tau):
    """``jobs``: [(state, quantity, instance)]; appends debug records and returns answers."""
    answers = model.answer([inst for _, _, inst in jobs], tau)
    tau = model.scorer.tau if tau is None else tau
    for (st, q, inst), ans in zip(jobs, answers):
        st.debug.append({
            "quantity": q.annot_id, "set": q.annot_set, "template": inst.template,
            "question": inst.text, "required": inst.required, "best": ans["best"],
            "s_null": ans["s_null"], "tau": tau, "answered": ans["span"] is not None,
            "answer": None if ans["span"] is None else [ans["span"].start, ans["span"].end],
            "answer_text": None if ans["span"] is None else st.surface(ans["span"]),
            "passage_truncated": inst.truncated,
        })
    return answers


def multi_turn_batch(items: Sequence[tuple], model: QaModel, tau: Optional[float] = None) -> list[RelationGraph]:
    """Run the question cascade for several ``(document, quantities)`` pairs.

    Stage order: template 1 for every quantity, then 2 or 3, then 4-6. Each
    stage is one batched pass across all documents.
    """
    hyper = model.hyper
    states = []
    for doc, quantities in items:
        document = doc.document if isinstance(doc, AnnotatedDoc) else doc
        states.append(_DocTurns(document, quantities))
    live = [(st, q) for st in states for q in st.quantities if st.tokens]

    jobs = [(st, q, st.instance(1, (q.surface,), q, hyper)) for st, q in live]
    for (st, q, _), ans in zip(jobs, _ask(model, jobs, tau) if jobs else []):
        if ans["span"] is not None:
            st.prop[q.annot_id] = ans["span"]

    jobs = []
    for st, q in live:
        p = st.prop.get(q.annot_id)
        if p is not None:
            jobs.append((st, q, st.instance(2, (st.surface(p), q.surface), q, hyper)))
        else:
            jobs.append((st, q, st.instance(3, (q.surface,), q, hyper)))
    for (st, q, _), ans in zip(jobs, _ask(model, jobs, tau) if jobs else []):
        st.ent[q.annot_id] = ans["span"]

    jobs, roles = [], []
    for st, q in live:
        jobs.append((st, q, st.instance(4, (q.surface,), q, hyper)))
        roles.append(QUANTITY)
        jobs.append((st, q, st.instance(5, (st.surface(st.ent[q.annot_id]),), q, hyper)))
        roles.append(ENTITY)
        p = st.prop.get(q.annot_id)
        if p is not None:
            jobs.append((st, q, st.instance(6, (st.surface(p),), q, hyper)))
            roles.append(PROPERTY)
    for (st, q, _), role, ans in zip(jobs, roles, _ask(model, jobs, tau) if jobs else []):
        if ans["span"] is not None:
            st.quals[q.annot_id].append((ans["span"], role))

    graphs = []
    for st in states:
        graph = RelationGraph(_assemble(st), st.debug)
        validate_graph(graph.doc)
        graphs.append(graph)
    return graphs


def _assemble(st: _DocTurns) -> AnnotatedDoc:
    annotations = list(st.quantities)
    relations = []
    used = {a.annot_id for a in annotations}
    counter = [len(annotations)]

    def new(kind, span, set_id):
        counter[0] += 1
        while f"{st.doc.doc_id}-T{counter[0]}" in used:
            counter[0] += 1
        aid = f"{st.doc.doc_id}-T{counter[0]}"
        used.add(aid)
        annotations.append(Annotation(aid, set_id, kind, span, st.surface(span)))
        return aid

    for q in st.quantities:
        if q.annot_id not in st.ent:
            continue
        targets = {QUANTITY: q.annot_id}
        p = st.prop.get(q.annot_id)
        if p is not None:
            pid = new(PROPERTY, p, q.annot_set)
            relations.append(Relation(HAS_QUANTITY, pid, q.annot_id))
            eid = new(ENTITY, st.ent[q.annot_id], q.annot_set)
            relations.append(Relation(HAS_PROPERTY, eid, pid))
            targets[PROPERTY] = pid
        else:
            eid = new(ENTITY, st.ent[q.annot_id], q.annot_set)
            relations.append(Relation(HAS_QUANTITY, eid, q.annot_id))
        targets[ENTITY] = eid
        merged = {}
        for span, role in st.quals[q.annot_id]:
            if span not in merged:
                merged[span] = new(QUALIFIER, span, q.annot_set)
            relations.append(Relation(QUALIFIES, merged[span], targets[role]))
    return AnnotatedDoc(st.doc, annotations, relations)


def multi_turn(doc: Document | AnnotatedDoc, quantities: Sequence[Annotation], model: QaModel,
               tau: Optional[float] = None) -> RelationGraph:
    return multi_turn_batch([(doc, quantities)], model, tau)[0]


# ---------------------------------------------------------------- training and tuning

QA_KINDS = (ENTITY, PROPERTY, QUALIFIER)


def evaluate_qa(model: QaModel, docs: Sequence[AnnotatedDoc], tau: Optional[float] = None) -> dict:
    """Overlap scores of the QA kinds when the cascade starts from gold quantities."""
    graphs = multi_turn_batch([(d, d.of_kind(QUANTITY)) for d in docs], model, tau)
    counts = {k: SpanCounts() for k in QA_KINDS}
    for gold, graph in zip(docs, graphs):
        for k in QA_KINDS:
            counts[k] = counts[k].add(span_counts([a.span for a in graph.doc.of_kind(k)],
                                                  [a.span for a in gold.of_kind(k)]))
    pooled = SpanCounts()
    for c in counts.values():
        pooled = pooled.add(c)
    out = {f"{k}_f1": counts[k].scores()["overlap_f1"] for k in QA_KINDS}
    out["overlap_f1"] = pooled.scores()["overlap_f1"]
    return out


def doc_batches(instances: Sequence[QaInstance], batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled batches that keep each document's questions together."""
    by_doc = defaultdict(list)
    for i, inst in enumerate(instances):
        by_doc[inst.doc_id].append(i)
    docs = sorted(by_doc)
    order = [i for d in rng.permutation(len(docs)) for i in rng.permutation(by_doc[docs[d]])]
    batches = [order[k:k + batch_size] for k in range(0, len(order), batch_size)]
    return [batches[k] for k in rng.permutation(len(batches))]


def train_qa(train: Corpus, dev: Optional[Corpus], enc_cfg: EncoderConfig, hyper: QaHyper,
             on_epoch: Optional[Callable[[dict], None]] = None):
    """Adam on start+end cross-entropy; returns ``(best_dev_model, history)``."""
    if dev is None:
        train, dev = split_dev(train, hyper.dev_fraction, hyper.seed)
    instances = [inst for d in train for inst in gold_instances(d, hyper)]
    if not instances:
        raise ValueError("training corpus yields no QA instances")
    model = QaModel.create(enc_cfg, instances, hyper)
    params = model.params()
    opt = Adam(params, lr=hyper.lr, clip_norm=hyper.clip_norm)
    rng = np.random.default_rng(hyper.seed + 1)
    dev_docs = list(dev)

    def dev_scores():
        return evaluate_qa(model, dev_docs) if dev_docs else {"overlap_f1": 0.0}

    scores = dev_scores()
    best = (scores["overlap_f1"], snapshot(params))
    history = [{"epoch": 0, "train_loss": None, **scores}]
    if on_epoch:
        on_epoch(history[-1])
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.time()
        total = 0.0
        for batch in doc_batches(instances, hyper.batch_size, rng):
            opt.zero_grad()
            total += model.loss([instances[i] for i in batch], rng=rng) * len(batch)
            opt.step()
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite QA loss at epoch {epoch}")
        scores = dev_scores()
        record = {"epoch": epoch, "train_loss": total / len(instances), **scores,
                  "seconds": round(time.time() - t0, 3)}
        history.append(record)
        log.info("qa epoch %d loss %.4f dev F1 %.4f", epoch, record["train_loss"], scores["overlap_f1"])
        if on_epoch:
            on_epoch(record)
        if scores["overlap_f1"] > best[0]:
            best = (scores["overlap_f1"], snapshot(params))
    assign_params(params, best[1])
    return model, history


def threshold_curve(gaps, overlaps, has_gold) -> tuple[np.ndarray, np.ndarray]:
    """Abstention-aware overlap F1 for every candidate threshold.

    Candidates are the observed gaps (``tau = g`` answers every question with
    gap >= g) plus one value above the largest gap, which abstains everywhere.
    """
    gaps = np.asarray(gaps, dtype=float)
    overlaps = np.asarray(overlaps, dtype=float)
    has_gold = np.asarray(has_gold, dtype=bool)
    cands = np.unique(gaps)
    cands = np.append(cands, cands[-1] + 1.0)
    f1 = np.empty(len(cands))
    n_gold = int(has_gold.sum())
    for c, tau in enumerate(cands):
        answered = gaps >= tau
        hit = answered & has_gold & (overlaps > 0)
        counts = SpanCounts(int(answered.sum()), n_gold, int(hit.sum()), 0, float(overlaps[hit].sum()))
        f1[c] = counts.scores()["overlap_f1"]
    return cands, f1


def tune_threshold(model: QaModel, dev: Corpus | Sequence[AnnotatedDoc]) -> tuple[float, dict]:
    """Pick the null threshold maximizing overlap F1 on teacher-forced abstainable questions."""
    docs = list(dev)
    instances = [inst for d in docs for inst in gold_instances(d, model.hyper)
                 if not inst.required]
    if not instances:
        raise EmptyDevSet("no abstainable dev questions to tune on")
    answers = model.answer(instances, tau=-np.inf)
    gaps, overlaps, has_gold = [], [], []
    for inst, ans in zip(instances, answers):
        gaps.append(ans["gap"])
        has_gold.append(inst.answer is not None)
        overlaps.append(span_counts([ans["span"]], [inst.answer]).overlap if inst.answer else 0.0)
    cands, f1 = threshold_curve(gaps, overlaps, has_gold)
    best = int(np.argmax(f1))          # first maximum, i.e. smallest tau on ties
    tau = float(cands[best])
    model.scorer.tau = tau
    model.hyper.tau = tau
    return tau, {"tau": tau, "f1": float(f1[best]), "candidates": len(cands),
                 "questions": len(instances), "answered_gold": int(np.sum(has_gold))}
