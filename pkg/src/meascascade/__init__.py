"""Measurement extraction cascade: quantities, then units and modifiers, then
entities, properties and qualifiers via question answering."""

from .corpus import Corpus, Document, Span, load_corpus, read_tsv, write_tsv
from .metrics import score_corpus

__version__ = "0.1.0"

__all__ = ["Corpus", "Document", "Span", "load_corpus", "read_tsv", "write_tsv", "score_corpus"]
