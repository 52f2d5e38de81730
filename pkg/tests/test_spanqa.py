import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from meascascade.corpus import (
    ENTITY, HAS_PROPERTY, HAS_QUANTITY, PROPERTY, QUALIFIER, QUALIFIES, QUANTITY,
    AnnotatedDoc, Annotation, Corpus, Document, QuantityDetail, Relation, Span, tokenize,
)
from meascascade.encoder import EncoderConfig
from meascascade.errors import ArityMismatch, DimensionMismatch, EmptyDevSet, IllegalRelation
from meascascade.metrics import SpanCounts, span_counts
from meascascade.netcore import grad_check
from meascascade.spanqa import (
    ABSTAINABLE, TEMPLATES, QaHyper, QaModel, SpanScorer, best_span, fill_template, gold_instances,
    make_instance, multi_turn, score_spans, threshold_curve, tune_threshold, validate_graph,
)

TINY = EncoderConfig(word_embed_dim=6, char_embed_dim=3, char_hidden=3, token_hidden=4, layers=1)


# ---------------------------------------------------------------- templates

def test_fill_template_wording():
    assert fill_template(1, "5 kg") == "What is the measured property of the quantity 5 kg?"
    assert fill_template(2, "mass", "5 kg") == (
        "What is the measured entity that has the measured property mass of the quantity 5 kg?")
    assert fill_template(3, "5 kg") == "What is the measured entity that has the quantity 5 kg?"
    assert fill_template(6, "mass").endswith("measured property mass?")


@pytest.mark.parametrize("template,args", [(4, ()), (1, ("a", "b")), (2, ("mass",)), (3, ("",))])
def test_fill_template_arity(template, args):
    with pytest.raises(ArityMismatch):
        fill_template(template, *args)


def test_template_table_shape():
    assert sorted(TEMPLATES) == [1, 2, 3, 4, 5, 6]
    assert [TEMPLATES[t].slots for t in range(1, 7)] == [1, 2, 1, 1, 1, 1]
    assert all(TEMPLATES[t].slots == len(TEMPLATES[t].roles) for t in TEMPLATES)
    assert ABSTAINABLE == (1, 4, 5, 6)


# ---------------------------------------------------------------- scoring

def scorer(dim, seed=0):
    return SpanScorer(dim, np.random.default_rng(seed))


def test_zero_start_vector_is_uniform(rng):
    sc = scorer(4)
    sc.S.value[:] = 0.0
    start, _, _ = score_spans(rng.normal(size=(5, 4)), sc)
    assert np.allclose(np.exp(start), 0.2, atol=1e-15)


def test_score_spans_scalar_oracle(rng):
    n, d = 7, 3
    T = rng.normal(size=(n, d))
    sc = scorer(d, seed=5)
    start, end, s_null = score_spans(T, sc)
    for vec, out in ((sc.S.value, start), (sc.E.value, end)):
        logits = [sum(T[i][k] * vec[k] for k in range(d)) for i in range(n)]
        z = math.log(sum(math.exp(v) for v in logits))
        assert np.allclose(out, [v - z for v in logits], atol=1e-12)
    expected = sum(T[0][k] * (sc.S.value[k] + sc.E.value[k]) for k in range(d))
    assert abs(s_null - expected) < 1e-12


@given(st.integers(1, 20), st.integers(0, 2**31 - 1), st.floats(0.1, 50))
def test_score_spans_normalized(n, seed, scale):
    r = np.random.default_rng(seed)
    start, end, _ = score_spans(scale * r.normal(size=(n, 3)), scorer(3, seed))
    assert abs(np.exp(start).sum() - 1) < 1e-12 and abs(np.exp(end).sum() - 1) < 1e-12


def test_score_spans_shape_errors():
    with pytest.raises(DimensionMismatch):
        score_spans(np.zeros((3, 5)), scorer(4))
    with pytest.raises(DimensionMismatch):
        score_spans(np.zeros((0, 4)), scorer(4))


def test_best_span_examples():
    s, e = [2, 0, 1], [0, 1, 3]
    assert best_span(s, e, (0, 3), return_score=True) == ((0, 2), 5.0)
    assert best_span(s, e, (0, 3), s_null=6.0, tau=0.0) is None
    assert best_span(s, e, (0, 3), s_null=100.0, required=True) == (0, 2)
    assert best_span(s, e, (0, 3), s_null=5.0) == (0, 2)       # equality answers
    assert best_span(s, e, (1, 3)) == (2, 2)
    with pytest.raises(ValueError):
        best_span(s, e, (2, 2))


def enumerate_best(s, e, p0, p1, cap):
    best, arg = -np.inf, None
    for i in range(p0, p1):
        for j in range(i, min(p1, i + cap)):
            if s[i] + e[j] > best:
                best, arg = s[i] + e[j], (i, j)
    return arg, best


def test_best_span_matches_enumeration_200():
    r = np.random.default_rng(99)
    for _ in range(200):
        n = int(r.integers(1, 40))
        s, e = r.normal(size=n), r.normal(size=n)
        if r.random() < 0.3:                     # force ties
            s, e = np.round(s), np.round(e)
        p0 = int(r.integers(0, n))
        p1 = int(r.integers(p0 + 1, n + 1))
        cap = int(r.integers(1, 35))
        arg, best = enumerate_best(s, e, p0, p1, cap)
        span, score = best_span(s, e, (p0, p1), max_len=cap, return_score=True)
        assert span == arg and score == best


@given(st.integers(1, 50), st.integers(0, 2**31 - 1), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_best_span_range_and_required(n, seed, s_null, tau):
    r = np.random.default_rng(seed)
    s, e = 5 * r.normal(size=n), 5 * r.normal(size=n)
    p0 = int(r.integers(0, n))
    span = best_span(s, e, (p0, n), s_null, tau, required=True, max_len=30)
    assert span is not None
    assert p0 <= span[0] <= span[1] < n and span[1] - span[0] + 1 <= 30


@given(st.integers(0, 2**31 - 1))
def test_best_span_tau_monotone(seed):
    r = np.random.default_rng(seed)
    mats = [(r.normal(size=9), r.normal(size=9), float(r.normal())) for _ in range(30)]
    taus = np.sort(r.normal(scale=3, size=12))
    answered = [sum(best_span(s, e, (1, 9), sn, t) is not None for s, e, sn in mats) for t in taus]
    assert all(a >= b for a, b in zip(answered, answered[1:]))


# ---------------------------------------------------------------- instances

def relational_doc():
    text = "The mass of the sample was about 5 kg on Monday. Pressure reached 3 bar."
    d = Document("r1", text)

    def ann(aid, aset, kind, surface, payload=None):
        k = text.index(surface)
        return Annotation(aid, aset, kind, Span(k, k + len(surface)), surface, payload)

    anns = [ann("T1", 1, QUANTITY, "5 kg", QuantityDetail("kg", ("IsApproximate",))),
            ann("T2", 1, PROPERTY, "mass"), ann("T3", 1, ENTITY, "sample"),
            ann("T4", 1, QUALIFIER, "on Monday"),
            ann("T5", 2, QUANTITY, "3 bar", QuantityDetail("bar")), ann("T6", 2, ENTITY, "Pressure")]
    rels = [Relation(HAS_QUANTITY, "T2", "T1"), Relation(HAS_PROPERTY, "T3", "T2"),
            Relation(QUALIFIES, "T4", "T1"), Relation(HAS_QUANTITY, "T6", "T5")]
    return AnnotatedDoc(d, anns, rels)


def test_gold_instances_cover_templates():
    doc = relational_doc()
    insts = gold_instances(doc, QaHyper())
    by = {(i.set_id, i.template): i for i in insts}
    assert sorted(by) == [(1, 1), (1, 2), (1, 4), (1, 5), (1, 6), (2, 1), (2, 3), (2, 4), (2, 5)]
    text = doc.document.text
    assert text[by[1, 1].answer.start:by[1, 1].answer.end] == "mass"
    assert text[by[1, 2].answer.start:by[1, 2].answer.end] == "sample"
    assert text[by[1, 4].answer.start:by[1, 4].answer.end] == "on Monday"
    assert by[2, 1].answer is None and by[1, 5].answer is None
    assert by[1, 2].required and not by[1, 1].required
    for inst in insts:
        if inst.answer is not None:
            a = inst.answer_tokens()
            assert inst.passage[a[0]].span.start >= inst.answer.start
            assert inst.passage[a[1]].span.end <= inst.answer.end


def test_passage_truncated_never_question():
    words = " ".join(f"w{k}" for k in range(600))
    d = Document("long", words + " 5 kg")
    tokens = tokenize(d)
    anchor = Span(len(words) + 1, len(words) + 5)
    inst = make_instance("long", tokens, 1, ("5 kg",), anchor, QaHyper(max_len=512))
    assert inst.truncated and len(inst.words()) == 512
    assert inst.words()[2:2 + len(inst.question)] == [t.surface for t in tokenize(inst.text)]
    windowed = make_instance("long", tokens, 1, ("5 kg",), anchor, QaHyper(context_window=5))
    assert not windowed.truncated and len(windowed.passage) == 7
    assert windowed.passage[-1].surface == "kg"


# ---------------------------------------------------------------- model

@pytest.fixture(scope="module")
def tiny_qa(mini_corpus):
    insts = [i for d in mini_corpus for i in gold_instances(d, QaHyper(context_window=6))]
    hyper = QaHyper(context_window=6, seed=4)
    return QaModel.create(TINY, insts, hyper), insts


def test_qa_gradient_check(tiny_qa):
    model, insts = tiny_qa
    params = model.params()
    batch = [i for i in insts if i.answer is not None][:2] + [i for i in insts if i.answer is None][:1]

    def loss():
        for p in params:
            p.zero_grad()
        return model.loss(batch)          # already a batch mean

    rep = grad_check(loss, params, max_per_param=4)
    assert rep.passed, rep


def test_answers_respect_required(tiny_qa):
    model, insts = tiny_qa
    for tau in (-1e9, 0.0, 1e9):
        for inst, ans in zip(insts, model.answer(insts, tau)):
            if inst.required:
                assert ans["span"] is not None
            elif tau == 1e9:
                assert ans["span"] is None
            elif tau == -1e9:
                assert ans["span"] is not None


def test_threshold_monotone_on_model(tiny_qa):
    model, insts = tiny_qa
    gaps = [a["gap"] for a in model.answer(insts, tau=-np.inf)]
    taus = np.quantile(gaps, np.linspace(0, 1, 9))
    counts = [sum(a["span"] is not None for i, a in zip(insts, model.answer(insts, t)) if not i.required)
              for t in taus]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def graph_edges(graph):
    ids = graph.doc.by_id()
    return sorted((r.kind, ids[r.source].kind, ids[r.target].kind) for r in graph.doc.relations)


def test_multi_turn_with_property(tiny_qa):
    model, _ = tiny_qa
    doc = relational_doc()
    qs = [a for a in doc.annotations if a.kind == QUANTITY][:1]
    g = multi_turn(doc.document, qs, model, tau=-1e9)          # property question answers
    edges = graph_edges(g)
    assert (HAS_QUANTITY, PROPERTY, QUANTITY) in edges and (HAS_PROPERTY, ENTITY, PROPERTY) in edges
    assert [d["template"] for d in g.debug] == [1, 2, 4, 5, 6]
    validate_graph(g.doc)


def test_multi_turn_without_property(tiny_qa):
    model, _ = tiny_qa
    doc = relational_doc()
    qs = [a for a in doc.annotations if a.kind == QUANTITY]
    g = multi_turn(doc, qs, model, tau=1e9)                    # only required questions answer
    assert graph_edges(g) == [(HAS_QUANTITY, ENTITY, QUANTITY)] * 2
    assert [d["template"] for d in g.debug] == [1, 1, 3, 3, 4, 5, 4, 5]
    assert all(d["answered"] == (d["template"] == 3) for d in g.debug)


def test_multi_turn_zero_quantities(tiny_qa):
    model, _ = tiny_qa
    g = multi_turn(Document("z", "Nothing measured here."), [], model)
    assert g.doc.annotations == [] and g.doc.relations == [] and g.debug == []


def test_validate_graph_rejects_bad_structure():
    doc = relational_doc()
    bad = AnnotatedDoc(doc.document, doc.annotations, doc.relations + [Relation(HAS_QUANTITY, "T3", "T1")])
    with pytest.raises(IllegalRelation):
        validate_graph(bad)
    lonely = AnnotatedDoc(doc.document, doc.annotations, doc.relations[1:])
    with pytest.raises(IllegalRelation):
        validate_graph(lonely)
    validate_graph(doc)


def test_save_load_roundtrip(tiny_qa, tmp_path):
    model, insts = tiny_qa
    model.scorer.tau = 0.25
    model.save(tmp_path)
    back = QaModel.load(tmp_path)
    assert back.scorer.tau == 0.25
    a, b = model.answer(insts[:10]), back.answer(insts[:10])
    assert [x["span"] for x in a] == [x["span"] for x in b]
    assert all(x["best"] == y["best"] for x, y in zip(a, b))
    model.scorer.tau = 0.0


def test_zero_qualifier_corpus_targets_null(mini_corpus):
    stripped = []
    for d in list(mini_corpus)[:5]:
        anns = [a for a in d.annotations if a.kind != QUALIFIER]
        keep = {a.annot_id for a in anns}
        rels = [r for r in d.relations if r.source in keep and r.target in keep]
        stripped.append(AnnotatedDoc(d.document, anns, rels))
    insts = [i for d in stripped for i in gold_instances(d, QaHyper())]
    quals = [i for i in insts if i.template in (4, 5, 6)]
    assert quals and all(i.answer is None and i.answer_tokens() is None for i in quals)


# ---------------------------------------------------------------- threshold tuning

def sweep_oracle(model, instances):
    """Exhaustive search: decode at every observed gap and score from scratch."""
    gaps = sorted({a["gap"] for a in model.answer(instances, tau=-np.inf)})
    best = None
    for tau in gaps + [gaps[-1] + 1.0]:
        total = SpanCounts()
        for inst, ans in zip(instances, model.answer(instances, tau)):
            pred = [ans["span"]] if ans["span"] is not None else []
            gold = [inst.answer] if inst.answer is not None else []
            total = total.add(span_counts(pred, gold))
        f1 = total.scores()["overlap_f1"]
        if best is None or f1 > best[1]:
            best = (tau, f1)
    return best


def test_tune_threshold_matches_sweep(tiny_qa, mini_corpus):
    model, _ = tiny_qa
    dev = list(mini_corpus)[:6]
    abstainable = [i for d in dev for i in gold_instances(d, model.hyper) if not i.required]
    tau, f1 = sweep_oracle(model, abstainable)
    got, report = tune_threshold(model, dev)
    assert got == tau and abs(report["f1"] - f1) < 1e-12
    assert model.scorer.tau == got
    model.scorer.tau = 0.0


def test_threshold_curve_boundaries():
    gaps = np.array([0.5, -1.0, 2.0, 0.1])
    cands, f1 = threshold_curve(gaps, np.ones(4), np.ones(4, dtype=bool))
    assert cands[int(np.argmax(f1))] == -1.0                      # answer everything
    cands, f1 = threshold_curve(gaps, np.zeros(4), np.zeros(4, dtype=bool))
    tau = cands[int(np.argmax(f1))]
    assert tau > gaps.max() and not np.any(gaps >= tau)          # answer nothing
    cands, f1 = threshold_curve([0.0, 0.0, 1.0], [0.5, 0.5, 1.0], [True, True, True])
    assert list(cands) == [0.0, 1.0, 2.0] and int(np.argmax(f1)) == 0


def test_tune_threshold_empty_dev(tiny_qa):
    model, _ = tiny_qa
    with pytest.raises(EmptyDevSet):
        tune_threshold(model, Corpus([]))
