import json

import pytest
from hypothesis import given, strategies as st

from meascascade.corpus import (
    ENTITY, HAS_QUANTITY, QUANTITY, TSV_COLUMNS, AnnotatedDoc, Annotation, Corpus, Document,
    QuantityDetail, Relation, Span, is_valid_iob, iob_to_spans, load_corpus, read_tsv,
    spans_to_iob, tokenize, truncate, validate_corpus, write_tsv,
)
from meascascade.corpus import B, I, O
from meascascade.errors import (
    DanglingRelation, IllegalRelation, OffsetOutOfRange, OverlappingGold, ParseError, SurfaceMismatch,
)


def surfaces(text):
    return [t.surface for t in tokenize(text)]


def test_tokenize_offsets_simple():
    toks = tokenize("weighs 5 kg.")
    assert [t.surface for t in toks] == ["weighs", "5", "kg", "."]
    assert [(t.span.start, t.span.end) for t in toks] == [(0, 6), (7, 8), (9, 11), (11, 12)]


def test_tokenize_dimensions_and_hyphen():
    assert surfaces("300 m x 400 m") == ["300", "m", "x", "400", "m"]
    assert surfaces("a 1.5-fold rise") == ["a", "1.5", "-", "fold", "rise"]


def _reference_scan(text):
    # independent rule: numbers keep inner . and , between digits; letter runs; any other
    # non-space character stands alone
    out, i = [], 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
            continue
        j = i + 1
        if c.isdigit():
            while j < len(text) and (text[j].isdigit() or (
                    text[j] in ".," and j + 1 < len(text) and text[j + 1].isdigit())):
                j += 1
        elif c.isalpha():
            while j < len(text) and text[j].isalpha():
                j += 1
        out.append(text[i:j])
        i = j
    return out


@given(st.text(alphabet="ab1 .,-µ°()5x", max_size=40))
def test_tokenizer_matches_reference_scan(text):
    assert surfaces(text) == _reference_scan(text)


@given(st.text(max_size=60))
def test_token_offsets_reproduce_surface(text):
    for t in tokenize(text):
        assert text[t.span.start:t.span.end] == t.surface


def test_unicode_offsets_are_code_points():
    toks = tokenize("12 µm at 37 °C")
    assert [t.surface for t in toks] == ["12", "µm", "at", "37", "°", "C"]
    assert toks[1].span == Span(3, 5)


def test_spans_to_iob_basic():
    toks = tokenize("weighs 5 kg today")
    assert spans_to_iob(toks, [Span(7, 11)]) == [O, B, I, O]
    assert spans_to_iob(toks, []) == [O] * 4


def test_mid_token_gold_snaps_outward():
    toks = tokenize("weighs 500 kg today")
    tags = spans_to_iob(toks, [Span(8, 12)])      # "0 k" cuts both tokens
    assert tags == [O, B, I, O]
    assert iob_to_spans(toks, tags) == [Span(7, 13)]


@pytest.mark.parametrize("start,end", [(a, b) for a in range(0, 17) for b in range(a + 1, 18)])
def test_snapping_rule_exhaustive(start, end):
    text = "ab cd1 ef.gh ij k"
    toks = tokenize(text)
    covered = [t for t in toks if t.span.start < end and t.span.end > start]
    tags = spans_to_iob(toks, [Span(start, end)])
    if not covered:
        assert tags == [O] * len(toks)
        return
    expect = Span(covered[0].span.start, covered[-1].span.end)
    assert iob_to_spans(toks, tags) == [expect]


def test_iob_to_spans_runs():
    toks = tokenize("weighs 5 kg today")
    assert iob_to_spans(toks, [O, B, I, O]) == [Span(7, 11)]
    assert iob_to_spans(toks, [O] * 4) == []
    toks5 = tokenize("a b c d e")
    assert iob_to_spans(toks5, [B, B, O, B, I]) == [Span(0, 1), Span(2, 3), Span(6, 9)]


@given(st.lists(st.booleans(), min_size=1, max_size=12), st.data())
def test_iob_round_trip_token_aligned(breaks, data):
    toks = tokenize(" ".join("w" for _ in breaks))
    # random non-overlapping token-aligned spans
    spans, i = [], 0
    while i < len(toks):
        if data.draw(st.booleans()):
            j = data.draw(st.integers(i, len(toks) - 1))
            spans.append(Span(toks[i].span.start, toks[j].span.end))
            i = j + 2
        else:
            i += 1
    tags = spans_to_iob(toks, spans)
    assert is_valid_iob(tags)
    assert iob_to_spans(toks, tags) == spans


def test_truncate_cases():
    toks = tokenize(" ".join(["w"] * 600))
    cut, flag = truncate(toks, 512)
    assert len(cut) == 512 and flag
    short = toks[:100]
    same, flag = truncate(short, 512)
    assert same == short and not flag
    one, flag = truncate(toks, 1)
    assert len(one) == 1 and flag


def _doc(text, anns, rels=()):
    return AnnotatedDoc(Document("d1", text), list(anns), list(rels))


def test_read_single_quantity_row(tmp_path):
    (tmp_path / "d1.txt").write_text("it weighs 5 kg", encoding="utf-8")
    other = json.dumps({"unit": "kg", "mods": ["IsApproximate"]})
    (tmp_path / "a.tsv").write_text("\t".join(TSV_COLUMNS) + "\n" +
                                    f"d1\t1\tQuantity\t10\t14\tT1\t5 kg\t{other}\n", encoding="utf-8")
    corpus = load_corpus(tmp_path)
    (ann,) = corpus.docs[0].annotations
    assert ann.payload == QuantityDetail("kg", ("IsApproximate",))
    assert ann.span == Span(10, 14)


def _write(tmp_path, rows, text="it weighs 5 kg"):
    (tmp_path / "d1.txt").write_text(text, encoding="utf-8")
    body = "".join("\t".join(r) + "\n" for r in rows)
    (tmp_path / "a.tsv").write_text("\t".join(TSV_COLUMNS) + "\n" + body, encoding="utf-8")
    return tmp_path / "a.tsv"


def test_dangling_relation(tmp_path):
    p = _write(tmp_path, [["d1", "1", "MeasuredEntity", "3", "9", "T2", "weighs",
                           json.dumps({"HasQuantity": "T9"})]])
    with pytest.raises(DanglingRelation):
        read_tsv(p)


def test_loader_errors(tmp_path):
    with pytest.raises(OffsetOutOfRange):
        read_tsv(_write(tmp_path, [["d1", "1", "Quantity", "10", "99", "T1", "5 kg", "{}"]]))
    with pytest.raises(SurfaceMismatch):
        read_tsv(_write(tmp_path, [["d1", "1", "Quantity", "10", "14", "T1", "6 kg", "{}"]]))
    with pytest.raises(ParseError):
        read_tsv(_write(tmp_path, [["d1", "1", "Quantity", "x", "14", "T1", "5 kg", "{}"]]))
    with pytest.raises(OverlappingGold):
        read_tsv(_write(tmp_path, [["d1", "1", "Quantity", "10", "14", "T1", "5 kg", "{}"],
                                   ["d1", "1", "Quantity", "12", "14", "T2", "kg", "{}"]]))
    with pytest.raises(IllegalRelation):
        read_tsv(_write(tmp_path, [["d1", "1", "Quantity", "10", "14", "T1", "5 kg",
                                    json.dumps({"HasQuantity": "T2"})],
                                   ["d1", "1", "MeasuredEntity", "3", "9", "T2", "weighs", "{}"]]))


def test_unknown_other_keys_survive_round_trip(tmp_path):
    p = _write(tmp_path, [["d1", "1", "Quantity", "10", "14", "T1", "5 kg",
                           json.dumps({"unit": "kg", "zzz": [1, 2]}, sort_keys=True)]])
    corpus = read_tsv(p)
    out = tmp_path / "out" / "b.tsv"
    write_tsv(corpus, out)
    assert out.read_text(encoding="utf-8") == p.read_text(encoding="utf-8")


def test_mini_corpus_round_trip_is_byte_identical(mini_corpus, tmp_path):
    write_tsv(mini_corpus, tmp_path / "one" / "gold.tsv")
    again = load_corpus(tmp_path / "one")
    write_tsv(again, tmp_path / "two" / "gold.tsv")
    assert (tmp_path / "one" / "gold.tsv").read_bytes() == (tmp_path / "two" / "gold.tsv").read_bytes()
    validate_corpus(again)


def test_documents_without_rows_are_kept(tmp_path):
    (tmp_path / "empty.txt").write_text("nothing here", encoding="utf-8")
    _write(tmp_path, [["d1", "1", "Quantity", "10", "14", "T1", "5 kg", "{}"]])
    assert load_corpus(tmp_path).doc_ids() == ["d1", "empty"]


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 3)), max_size=5))
def test_random_corpus_round_trip(tmp_path_factory, layout):
    words = ["alpha", "5", "kg", "beta", "gamma", "7", "mL", "delta"]
    text = " ".join(words * 2)
    toks = tokenize(text)
    anns, rels, pos = [], [], 0
    for n, (gap, width) in enumerate(layout, start=1):
        a, b = pos + gap, pos + gap + width - 1
        if b >= len(toks):
            break
        span = Span(toks[a].span.start, toks[b].span.end)
        anns.append(Annotation(f"T{2 * n}", n, QUANTITY, span, text[span.start:span.end],
                               QuantityDetail("kg" if n % 2 else None, ("IsCount",) * (n % 3 == 0))))
        pos = b + 1
    if anns:
        anns.append(Annotation("T1", 1, ENTITY, Span(0, 5), "alpha"))
        rels.append(Relation(HAS_QUANTITY, "T1", anns[0].annot_id))
    corpus = Corpus([_doc(text, anns, rels)])    # only quantity spans must be disjoint
    d = tmp_path_factory.mktemp("rt")
    write_tsv(corpus, d / "x.tsv")
    back = read_tsv(d / "x.tsv")
    write_tsv(back, d / "y.tsv")
    assert (d / "x.tsv").read_bytes() == (d / "y.tsv").read_bytes()
    assert back.docs[0].annotations == corpus.docs[0].annotations
