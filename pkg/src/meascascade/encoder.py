"""Token encoders producing one contextual vector per token.

``TokenEncoder`` is the trainable stand-in for a pretrained language model:
word embedding concatenated with a character BiLSTM summary, fed through a
stacked token-level BiLSTM. ``PrecomputedEncoder`` serves vectors computed
offline (one ``MEMB`` file per document) so real transformer features can be
plugged into the same heads.
"""

from __future__ import annotations

import re
import struct
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmbeddingFileMissing
from .netcore import BiLSTM, Embedding, StackedBiLSTM

PAD, UNK = "<pad>", "<unk>"
_DIGIT = re.compile(r"\d")


@dataclass
class EncoderConfig:
    kind: str = "bilstm"            # "bilstm" or "precomputed"
    word_embed_dim: int = 64
    char_embed_dim: int = 32
    char_hidden: int = 64
    token_hidden: int = 128
    layers: int = 2
    max_chars: int = 16
    min_word_count: int = 1
    unk_dropout: float = 0.05
    embedding_dir: Optional[str] = None
    embedding_dim: Optional[int] = None

    def check(self):
        if self.kind not in ("bilstm", "precomputed"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        for name in ("word_embed_dim", "char_embed_dim", "char_hidden", "token_hidden", "layers",
                     "max_chars"):
            if getattr(self, name) <= 0:
                raise ValueError(f"encoder {name} must be positive")
        if self.kind == "precomputed" and not self.embedding_dir:
            raise ValueError("precomputed encoder needs embedding_dir")


def normalize_word(w: str) -> str:
    return _DIGIT.sub("0", w.lower())


class Vocab:
    def __init__(self, items: Sequence[str]):
        self.itos = list(items)
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    @classmethod
    def build(cls, sequences: Iterable[Iterable[str]], min_count=1, specials=(PAD, UNK)):
        counts = Counter(x for seq in sequences for x in seq)
        items = list(specials) + sorted(w for w, c in counts.items() if c >= min_count
                                        and w not in specials)
        return cls(items)

    def __len__(self):
        return len(self.itos)

    def id(self, s: str) -> int:
        return self.stoi.get(s, self.stoi[UNK])


class TokenEncoder:
    def __init__(self, cfg: EncoderConfig, words: Vocab, chars: Vocab, rng: np.random.Generator,
                 extra_dim: int = 0, name: str = "enc"):
        self.cfg, self.words, self.chars = cfg, words, chars
        self.extra_dim = extra_dim
        self.word_emb = Embedding(f"{name}/word", len(words), cfg.word_embed_dim, rng)
        self.char_emb = Embedding(f"{name}/char", len(chars), cfg.char_embed_dim, rng)
        self.char_rnn = BiLSTM(f"{name}/char_rnn", cfg.char_embed_dim, cfg.char_hidden, rng)
        in_dim = cfg.word_embed_dim + 2 * cfg.char_hidden + extra_dim
        self.rnn = StackedBiLSTM(f"{name}/tok_rnn", in_dim, cfg.token_hidden, cfg.layers, rng)

    @property
    def output_dim(self) -> int:
        return self.rnn.output_dim

    def params(self):
        return (self.word_emb.params() + self.char_emb.params() + self.char_rnn.params()
                + self.rnn.params())

    @staticmethod
    def build_vocabs(token_lists: Iterable[Sequence[str]], min_count=1):
        token_lists = list(token_lists)
        words = Vocab.build(([normalize_word(t) for t in toks] for toks in token_lists), min_count)
        chars = Vocab.build((c for t in toks for c in t) for toks in token_lists)
        return words, chars

    # types are bucketed by length and each bucket runs as one packed batch:
    # few buckets keep the per-step Python overhead low, several keep padding low
    char_buckets = (2, 3, 4, 5, 6, 7, 8, 10, 12)

    def _char_summary(self, types: list[str]):
        """Final char-BiLSTM state per type (forward at the last char, backward at the first)."""
        H = self.cfg.char_hidden
        clipped = [t[:self.cfg.max_chars] or " " for t in types]
        lens = np.array([len(t) for t in clipped])
        bucket = np.searchsorted(np.asarray(self.char_buckets), lens, side="left")
        summary = np.empty((len(clipped), 2 * H))
        groups = []
        for k in np.unique(bucket):
            rows = np.flatnonzero(bucket == k)
            glens = lens[rows]
            ids = np.zeros((len(rows), glens.max()), dtype=np.int64)
            for r, row in enumerate(rows):
                ids[r, :glens[r]] = [self.chars.id(c) for c in clipped[row]]
            x, ecache = self.char_emb.forward(ids)
            out, rcache = self.char_rnn.forward(x, glens)
            idx = np.arange(len(rows))
            summary[rows, :H] = out[idx, glens - 1, :H]
            summary[rows, H:] = out[:, 0, H:]
            groups.append((rows, glens, ecache, rcache, out.shape))
        return summary, groups

    def _char_summary_backward(self, dsum, groups):
        H = self.cfg.char_hidden
        for rows, glens, ecache, rcache, shape in groups:
            dout = np.zeros(shape)
            dout[np.arange(len(rows)), glens - 1, :H] = dsum[rows, :H]
            dout[:, 0, H:] = dsum[rows, H:]
            self.char_emb.backward(self.char_rnn.backward(dout, rcache), ecache)

    def forward(self, batch: Sequence[Sequence[str]], extra: Optional[np.ndarray] = None,
                rng: Optional[np.random.Generator] = None):
        """Encode a batch of token-string lists (right-padded internally).

        ``extra`` [batch, steps, extra_dim] is appended to every token input.
        Passing ``rng`` enables training-time word dropout to ``<unk>``.
        Returns ``(vectors [batch, steps, dim], lengths, cache)``.
        """
        lengths = np.array([len(s) for s in batch])
        if lengths.min() < 1:
            raise ValueError("cannot encode an empty token sequence")
        steps = lengths.max()
        n = len(batch)
        word_ids = np.zeros((n, steps), dtype=np.int64)
        type_index = {}
        tok_type = np.zeros((n, steps), dtype=np.int64)
        unk = self.words.id(UNK)
        for b, toks in enumerate(batch):
            for t, tok in enumerate(toks):
                word_ids[b, t] = self.words.id(normalize_word(tok))
                tok_type[b, t] = type_index.setdefault(tok, len(type_index))
        if rng is not None and self.cfg.unk_dropout > 0:
            word_ids[rng.random((n, steps)) < self.cfg.unk_dropout] = unk
        types = list(type_index)
        wvec, wcache = self.word_emb.forward(word_ids)
        csum, ccache = self._char_summary(types)
        parts = [wvec, csum[tok_type]]
        if self.extra_dim:
            if extra is None or extra.shape != (n, steps, self.extra_dim):
                raise DimensionMismatch(f"expected extra features of shape {(n, steps, self.extra_dim)}")
            parts.append(extra)
        x = np.concatenate(parts, axis=-1)
        valid = (np.arange(steps)[None, :] < lengths[:, None])[..., None]
        x = x * valid
        out, rcache = self.rnn.forward(x, lengths)
        return out, lengths, (wcache, ccache, tok_type, len(types), valid, rcache)

    def backward(self, dout, cache):
        """Accumulate parameter gradients; returns the gradient for ``extra`` (or None)."""
        wcache, ccache, tok_type, n_types, valid, rcache = cache
        dx = self.rnn.backward(dout * valid, rcache) * valid
        wd = self.cfg.word_embed_dim
        cd = 2 * self.cfg.char_hidden
        self.word_emb.backward(dx[..., :wd], wcache)
        dsum = np.zeros((n_types, cd))
        np.add.at(dsum, tok_type.ravel(), dx[..., wd:wd + cd].reshape(-1, cd))
        self._char_summary_backward(dsum, ccache)
        return dx[..., wd + cd:] if self.extra_dim else None

    def config_dict(self) -> dict:
        return {"config": asdict(self.cfg), "words": self.words.itos, "chars": self.chars.itos,
                "extra_dim": self.extra_dim}


# ---------------------------------------------------------------- precomputed

EMB_MAGIC = b"MEMB"


def write_embeddings(path: str | Path, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype="<f8")
    n, d = vectors.shape
    Path(path).write_bytes(EMB_MAGIC + struct.pack("<II", n, d) + vectors.tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise EmbeddingFileMissing(str(path))
    data = path.read_bytes()
    if data[:4] != EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    n, d = struct.unpack_from("<II", data, 4)
    return np.frombuffer(data, dtype="<f8", count=n * d, offset=12).reshape(n, d).copy()


class PrecomputedEncoder:
    """Serves fixed per-document vectors from ``<embedding_dir>/<docId>.emb``."""

    def __init__(self, embedding_dir: str | Path, dim: int):
        self.embedding_dir = Path(embedding_dir)
        self.dim = dim

    @property
    def output_dim(self) -> int:
        return self.dim

    def params(self):
        return []

    def load(self, doc_id: str, n_tokens: int) -> np.ndarray:
        """Vectors for a document whose full tokenization has ``n_tokens`` tokens."""
        vec = read_embeddings(self.embedding_dir / f"{doc_id}.emb")
        if vec.shape[1] != self.dim:
            raise DimensionMismatch(f"{doc_id}: embedding dim {vec.shape[1]} != {self.dim}")
        if vec.shape[0] != n_tokens:
            raise DimensionMismatch(f"{doc_id}: {vec.shape[0]} vectors for {n_tokens} tokens")
        return vec
