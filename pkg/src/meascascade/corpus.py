"""Documents, annotations, tokenization and the MeasEval-style TSV layout.

Character offsets are Python string indices (Unicode code points), so spans
over text containing symbols such as ``µ`` or ``°`` stay aligned.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .errors import (
    DanglingRelation,
    IllegalRelation,
    InvalidIob,
    OffsetOutOfRange,
    OverlappingGold,
    ParseError,
    SurfaceMismatch,
)

log = logging.getLogger(__name__)

QUANTITY = "Quantity"
ENTITY = "MeasuredEntity"
PROPERTY = "MeasuredProperty"
QUALIFIER = "Qualifier"
ANNOTATION_KINDS = (QUANTITY, ENTITY, PROPERTY, QUALIFIER)

HAS_QUANTITY = "HasQuantity"
HAS_PROPERTY = "HasProperty"
QUALIFIES = "Qualifies"
RELATION_KINDS = (HAS_QUANTITY, HAS_PROPERTY, QUALIFIES)

# (source kind, target kind) pairs each relation may connect
LEGAL_ENDPOINTS = {
    HAS_QUANTITY: {(PROPERTY, QUANTITY), (ENTITY, QUANTITY)},
    HAS_PROPERTY: {(ENTITY, PROPERTY)},
    QUALIFIES: {(QUALIFIER, QUANTITY), (QUALIFIER, ENTITY), (QUALIFIER, PROPERTY)},
}

TSV_COLUMNS = (
    "docId", "annotSet", "annotType", "startOffset", "endOffset", "annotId", "text", "other",
)

# tag index order matters: tag 0 is the Viterbi tie-break default
TAGS = ("O", "B", "I")
O, B, I = 0, 1, 2

_TOKEN_RE = re.compile(r"\d+(?:[.,]\d+)*|[^\W\d_]+|\S")


@dataclass(frozen=True)
class Span:
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise OffsetOutOfRange(f"invalid span [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start

    def overlaps(self, other: "Span") -> bool:
        return self.start < other.end and other.start < self.end

    def intersection(self, other: "Span") -> int:
        return max(0, min(self.end, other.end) - max(self.start, other.start))


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ParseError(f"document {self.doc_id!r} has empty text")

    def slice(self, span: Span) -> str:
        return self.text[span.start:span.end]


@dataclass(frozen=True)
class QuantityDetail:
    unit: Optional[str] = None
    mods: tuple = ()


@dataclass(frozen=True)
class Annotation:
    annot_id: str
    annot_set: int
    kind: str
    span: Span
    surface: str
    payload: Optional[QuantityDetail] = None
    # unrecognised keys of the `other` column, kept for round-trips
    extra: tuple = ()

    def __post_init__(self):
        if self.kind not in ANNOTATION_KINDS:
            raise ParseError(f"unknown annotation kind {self.kind!r}")
        if self.payload is not None and self.kind != QUANTITY:
            raise ParseError(f"{self.annot_id}: payload only allowed on Quantity")


@dataclass(frozen=True)
class Relation:
    kind: str
    source: str
    target: str

    def __post_init__(self):
        if self.kind not in RELATION_KINDS:
            raise ParseError(f"unknown relation kind {self.kind!r}")
        if self.source == self.target:
            raise IllegalRelation(f"self-relation on {self.source}")


@dataclass(frozen=True)
class Token:
    surface: str
    span: Span


@dataclass
class AnnotatedDoc:
    document: Document
    annotations: list = field(default_factory=list)
    relations: list = field(default_factory=list)

    @property
    def doc_id(self) -> str:
        return self.document.doc_id

    def by_id(self) -> dict:
        return {a.annot_id: a for a in self.annotations}

    def of_kind(self, kind: str) -> list:
        return [a for a in self.annotations if a.kind == kind]


@dataclass
class Corpus:
    docs: list = field(default_factory=list)

    def __iter__(self) -> Iterator[AnnotatedDoc]:
        return iter(self.docs)

    def __len__(self):
        return len(self.docs)

    def doc_ids(self) -> list:
        return [d.doc_id for d in self.docs]

    def subset(self, ids: Iterable[str]) -> "Corpus":
        keep = set(ids)
        return Corpus([d for d in self.docs if d.doc_id in keep])


def tokenize(doc: Document | str) -> list[Token]:
    """Split on whitespace, then peel punctuation off as single-char tokens.

    Decimal numbers such as ``1.5`` stay whole; hyphens, slashes and other
    symbols become their own tokens.
    """
    text = doc.text if isinstance(doc, Document) else doc
    return [Token(m.group(), Span(m.start(), m.end())) for m in _TOKEN_RE.finditer(text)]


def truncate(tokens: Sequence[Token], max_len: int = 512) -> tuple[list[Token], bool]:
    """Keep the first ``max_len`` tokens; the flag reports whether any were dropped."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return list(tokens[:max_len]), len(tokens) > max_len


def check_non_overlapping(spans: Sequence[Span]) -> None:
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    for a, b in zip(ordered, ordered[1:]):
        if a.overlaps(b):
            raise OverlappingGold(f"gold spans overlap: {a} and {b}")


def spans_to_iob(tokens: Sequence[Token], gold: Sequence[Span]) -> list[int]:
    """Tag every token touching a gold span; spans cutting mid-token widen outward."""
    check_non_overlapping(gold)
    tags = [O] * len(tokens)
    for span in gold:
        first = True
        for i, tok in enumerate(tokens):
            if tok.span.overlaps(span):
                if tok.span.start < span.start or tok.span.end > span.end:
                    log.warning("gold span %s cuts token %r; snapping to token boundary",
                                span, tok.surface)
                if tags[i] != O:
                    # two gold spans snapped onto the same token
                    continue
                tags[i] = B if first else I
                first = False
    return tags


def is_valid_iob(tags: Sequence[int]) -> bool:
    prev = O
    for t in tags:
        if t == I and prev == O:
            return False
        prev = t
    return True


def iob_to_spans(tokens: Sequence[Token], tags: Sequence[int]) -> list[Span]:
    if len(tags) != len(tokens):
        raise InvalidIob("tag sequence and token list differ in length")
    spans = []
    start = end = None
    prev = O
    for tok, t in zip(tokens, tags):
        if t == I and prev == O:
            raise InvalidIob(f"I tag after O at token {tok.surface!r}")
        if t == B or t == O:
            if start is not None:
                spans.append(Span(start, end))
                start = None
        if t == B:
            start, end = tok.span.start, tok.span.end
        elif t == I:
            end = tok.span.end
        prev = t
    if start is not None:
        spans.append(Span(start, end))
    return spans


def tags_to_str(tags: Sequence[int]) -> list[str]:
    return [TAGS[t] for t in tags]


def tags_from_str(tags: Sequence[str]) -> list[int]:
    return [TAGS.index(t) for t in tags]


# ---------------------------------------------------------------- validation

def validate_doc(doc: AnnotatedDoc) -> None:
    text = doc.document.text
    ids = doc.by_id()
    if len(ids) != len(doc.annotations):
        raise ParseError(f"{doc.doc_id}: duplicate annotIds")
    for a in doc.annotations:
        if a.span.end > len(text):
            raise OffsetOutOfRange(f"{doc.doc_id}/{a.annot_id}: {a.span} beyond text of length {len(text)}")
        if text[a.span.start:a.span.end] != a.surface:
            raise SurfaceMismatch(
                f"{doc.doc_id}/{a.annot_id}: {a.surface!r} != {text[a.span.start:a.span.end]!r}")
    check_non_overlapping([a.span for a in doc.of_kind(QUANTITY)])
    for r in doc.relations:
        if r.source not in ids or r.target not in ids:
            missing = r.source if r.source not in ids else r.target
            raise DanglingRelation(f"{doc.doc_id}: {r.kind} references missing annotId {missing!r}")
        pair = (ids[r.source].kind, ids[r.target].kind)
        if pair not in LEGAL_ENDPOINTS[r.kind]:
            raise IllegalRelation(f"{doc.doc_id}: {r.kind} cannot link {pair[0]} -> {pair[1]}")


def validate_corpus(corpus: Corpus) -> None:
    seen = set()
    for doc in corpus:
        if doc.doc_id in seen:
            raise ParseError(f"duplicate docId {doc.doc_id!r}")
        seen.add(doc.doc_id)
        validate_doc(doc)


# ---------------------------------------------------------------- TSV I/O

def _parse_other(raw: str, where: str) -> dict:
    if raw.strip() == "":
        return {}
    try:
        other = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{where}: bad JSON in `other`: {exc}") from None
    if not isinstance(other, dict):
        raise ParseError(f"{where}: `other` must be a JSON object")
    return other


def _parse_int(raw: str, where: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ParseError(f"{where}: {raw!r} is not an integer") from None


def read_tsv(path: str | Path, text_dir: str | Path | None = None) -> Corpus:
    """Load annotations plus the ``<docId>.txt`` texts found in ``text_dir``.

    Every text file in the directory becomes a document, so documents without
    any annotation rows are still part of the corpus.
    """
    path = Path(path)
    text_dir = Path(text_dir) if text_dir is not None else path.parent
    texts = {}
    for p in sorted(text_dir.glob("*.txt")):
        with open(p, encoding="utf-8", newline="") as fh:
            texts[p.stem] = fh.read()

    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or tuple(lines[0].split("\t")) != TSV_COLUMNS:
        raise ParseError(f"{path}: missing or wrong header, expected {TSV_COLUMNS}")

    rows: dict[str, list] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        where = f"{path.name}:{lineno}"
        if len(cells) != len(TSV_COLUMNS):
            raise ParseError(f"{where}: expected {len(TSV_COLUMNS)} columns, got {len(cells)}")
        doc_id, annot_set, kind, start, end, annot_id, surface, other = cells
        if doc_id not in texts:
            raise ParseError(f"{where}: no text file for docId {doc_id!r}")
        start_i, end_i = _parse_int(start, where), _parse_int(end, where)
        if not (0 <= start_i < end_i <= len(texts[doc_id])):
            raise OffsetOutOfRange(f"{where}: [{start_i}, {end_i}) outside document {doc_id!r}")
        rows.setdefault(doc_id, []).append(
            (_parse_int(annot_set, where), kind, Span(start_i, end_i), annot_id, surface,
             _parse_other(other, where), where))

    corpus = Corpus()
    for doc_id in sorted(texts):
        document = Document(doc_id, texts[doc_id])
        annotations, relations = [], []
        for annot_set, kind, span, annot_id, surface, other, where in rows.get(doc_id, []):
            other = dict(other)
            payload = None
            if kind == QUANTITY:
                mods = other.pop("mods", [])
                if isinstance(mods, str):
                    mods = [mods]
                payload = QuantityDetail(other.pop("unit", None), tuple(mods))
            for rel in RELATION_KINDS:
                if rel in other:
                    targets = other.pop(rel)
                    for target in [targets] if isinstance(targets, str) else targets:
                        relations.append(Relation(rel, annot_id, target))
            try:
                annotations.append(Annotation(annot_id, annot_set, kind, span, surface, payload,
                                              tuple(sorted(other.items()))))
            except ParseError as exc:
                raise ParseError(f"{where}: {exc}") from None
        doc = AnnotatedDoc(document, annotations, relations)
        validate_doc(doc)
        corpus.docs.append(doc)
    return corpus


def annotation_other(ann: Annotation, relations: Sequence[Relation]) -> dict:
    other = dict(ann.extra)
    if ann.payload is not None:
        if ann.payload.unit is not None:
            other["unit"] = ann.payload.unit
        if ann.payload.mods:
            other["mods"] = list(ann.payload.mods)
    for rel in RELATION_KINDS:
        targets = [r.target for r in relations if r.source == ann.annot_id and r.kind == rel]
        if targets:
            other[rel] = targets[0] if len(targets) == 1 else targets
    return other


def dump_other(other: dict) -> str:
    return json.dumps(other, sort_keys=True, ensure_ascii=False)


def write_tsv(corpus: Corpus, path: str | Path, write_texts: bool = True) -> None:
    """Write the annotation TSV and, next to it, one ``<docId>.txt`` per document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = ["\t".join(TSV_COLUMNS)]
    for doc in sorted(corpus.docs, key=lambda d: d.doc_id):
        for a in doc.annotations:
            out.append("\t".join([
                doc.doc_id, str(a.annot_set), a.kind, str(a.span.start), str(a.span.end),
                a.annot_id, a.surface, dump_other(annotation_other(a, doc.relations)),
            ]))
        if write_texts:
            txt = path.parent / f"{doc.doc_id}.txt"
            if not txt.exists() or txt.read_text(encoding="utf-8") != doc.document.text:
                with open(txt, "w", encoding="utf-8", newline="") as fh:
                    fh.write(doc.document.text)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(out) + "\n")


def find_tsv(directory: str | Path) -> Path:
    tsvs = sorted(Path(directory).glob("*.tsv"))
    if len(tsvs) != 1:
        raise ParseError(f"{directory}: expected exactly one .tsv file, found {len(tsvs)}")
    return tsvs[0]


def load_corpus(location: str | Path) -> Corpus:
    """Accept either a corpus directory or a path to its TSV file."""
    location = Path(location)
    if not location.exists():
        raise FileNotFoundError(str(location))
    if location.is_dir():
        return read_tsv(find_tsv(location), location)
    return read_tsv(location)
