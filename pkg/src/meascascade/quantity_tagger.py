"""Quantity span tagger: token encoder -> ReLU emission projection -> CRF."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import crf as crfmod
from .corpus import B, I, O, QUANTITY, AnnotatedDoc, Corpus, Document, Span, iob_to_spans, \
    spans_to_iob, tokenize, truncate
from .encoder import EncoderConfig, PrecomputedEncoder, TokenEncoder, Vocab
from .errors import TrainingDiverged
from .metrics import SpanCounts, span_counts
from .netcore import Adam, Linear, assign_params, load_params, save_params, snapshot

log = logging.getLogger(__name__)


@dataclass
class TaggerHyper:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 13
    max_len: int = 512
    dev_fraction: float = 0.1
    constrained: bool = True
    # learn CRF boundary terms; off holds start/end at zero and W_start at one
    boundary: bool = True
    clip_norm: float = 5.0


@dataclass
class TaggerItem:
    doc_id: str
    tokens: list
    n_total: int
    truncated: bool
    tags: Optional[list] = None
    gold: list = field(default_factory=list)


def make_item(doc: AnnotatedDoc | Document, max_len=512, with_gold=True) -> TaggerItem:
    document = doc.document if isinstance(doc, AnnotatedDoc) else doc
    full = tokenize(document)
    tokens, flag = truncate(full, max_len) if full else ([], False)
    item = TaggerItem(document.doc_id, tokens, len(full), flag)
    if with_gold and isinstance(doc, AnnotatedDoc):
        item.gold = [a.span for a in doc.of_kind(QUANTITY)]
        item.tags = spans_to_iob(tokens, item.gold)
    return item


class QuantityTagger:
    def __init__(self, enc_cfg: EncoderConfig, encoder, rng: np.random.Generator,
                 constrained: bool = True):
        self.enc_cfg = enc_cfg
        self.encoder = encoder
        self.constrained = constrained
        self.proj = Linear("proj", encoder.output_dim, len(crfmod.iob_masks()[1]), rng, relu=True)
        self.proj.W.name, self.proj.b.name = "proj/W_l", "proj/b_l"
        self.crf = crfmod.CrfParams(3)

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, train_items: Sequence[TaggerItem], seed: int,
               constrained=True) -> "QuantityTagger":
        rng = np.random.default_rng(seed)
        if enc_cfg.kind == "precomputed":
            encoder = PrecomputedEncoder(enc_cfg.embedding_dir, enc_cfg.embedding_dim)
        else:
            words, chars = TokenEncoder.build_vocabs(
                ([t.surface for t in it.tokens] for it in train_items), enc_cfg.min_word_count)
            encoder = TokenEncoder(enc_cfg, words, chars, rng)
        return cls(enc_cfg, encoder, rng, constrained)

    def params(self):
        return self.encoder.params() + self.proj.params() + self.crf.params()

    # -- forward pieces

    def encode(self, items: Sequence[TaggerItem], rng=None):
        if isinstance(self.encoder, PrecomputedEncoder):
            lengths = np.array([len(it.tokens) for it in items])
            out = np.zeros((len(items), lengths.max(), self.encoder.output_dim))
            for b, it in enumerate(items):
                out[b, :len(it.tokens)] = self.encoder.load(it.doc_id, it.n_total)[:len(it.tokens)]
            return out, lengths, None
        return self.encoder.forward([[t.surface for t in it.tokens] for it in items], rng=rng)

    def emit(self, E):
        return self.proj.forward(E)

    def batch_loss(self, items: Sequence[TaggerItem], rng=None, backward=True) -> float:
        """Summed NLL of the batch; gradients are those of the batch mean."""
        E, lengths, ecache = self.encode(items, rng)
        L, pcache = self.emit(E)
        tags = np.zeros(L.shape[:2], dtype=np.int64)
        for b, it in enumerate(items):
            tags[b, :len(it.tags)] = it.tags
        loss, dL = crfmod.nll_batch(L, tags, lengths, self.crf, accumulate=backward,
                                    scale=1.0 / len(items))
        if backward:
            dE = self.proj.backward(dL, pcache)
            if ecache is not None:
                self.encoder.backward(dE, ecache)
        return loss

    def logits(self, items: Sequence[TaggerItem], batch_size=16):
        """Emission matrices, one [n_i, 3] array per item (empty items give None)."""
        out = [None] * len(items)
        live = [i for i, it in enumerate(items) if it.tokens]
        live.sort(key=lambda i: len(items[i].tokens))
        for k in range(0, len(live), batch_size):
            idx = live[k:k + batch_size]
            E, lengths, _ = self.encode([items[i] for i in idx])
            L, _ = self.emit(E)
            for b, i in enumerate(idx):
                out[i] = L[b, :lengths[b]]
        return out

    def predict_tags(self, items: Sequence[TaggerItem], logits=None) -> list[list[int]]:
        logits = self.logits(items) if logits is None else logits
        return [[] if L is None else crfmod.viterbi(L, self.crf, constrained=self.constrained)
                for L in logits]

    def predict_items(self, items: Sequence[TaggerItem], logits=None) -> list[list[Span]]:
        spans = []
        for it, tags in zip(items, self.predict_tags(items, logits)):
            if not self.constrained:
                tags = repair_iob(tags)
            spans.append(iob_to_spans(it.tokens, tags))
        return spans

    def predict_quantities(self, doc: Document | AnnotatedDoc, max_len=512) -> list[Span]:
        return self.predict_items([make_item(doc, max_len, with_gold=False)])[0]

    # -- persistence

    def save(self, directory: str | Path, prefix="quantity"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_params(directory / f"{prefix}.mprm", self.params())
        meta = {"encoder": asdict(self.enc_cfg), "constrained": self.constrained}
        if isinstance(self.encoder, TokenEncoder):
            meta["words"] = self.encoder.words.itos
            meta["chars"] = self.encoder.chars.itos
        (directory / f"{prefix}.json").write_text(json.dumps(meta, sort_keys=True, ensure_ascii=False))

    @classmethod
    def load(cls, directory: str | Path, prefix="quantity") -> "QuantityTagger":
        directory = Path(directory)
        meta = json.loads((directory / f"{prefix}.json").read_text())
        cfg = EncoderConfig(**meta["encoder"])
        rng = np.random.default_rng(0)
        if cfg.kind == "precomputed":
            encoder = PrecomputedEncoder(cfg.embedding_dir, cfg.embedding_dim)
        else:
            encoder = TokenEncoder(cfg, Vocab(meta["words"]), Vocab(meta["chars"]), rng)
        model = cls(cfg, encoder, rng, meta["constrained"])
        assign_params(model.params(), load_params(directory / f"{prefix}.mprm"))
        return model


def repair_iob(tags: Sequence[int]) -> list[int]:
    """Turn stray I tags (after O or at the start) into B."""
    out, prev = [], O
    for t in tags:
        if t == I and prev == O:
            t = B
        out.append(t)
        prev = t
    return out


def split_dev(corpus: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Seeded document-level split; at least one dev document when possible."""
    ids = sorted(corpus.doc_ids())
    rng = np.random.default_rng(seed)
    n_dev = int(round(fraction * len(ids)))
    if fraction > 0 and len(ids) > 1:
        n_dev = max(1, n_dev)
    dev = set(rng.permutation(ids)[:n_dev].tolist()) if n_dev else set()
    return corpus.subset(i for i in ids if i not in dev), corpus.subset(dev)


def length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list:
    """Batches of similar length, in random order; jitter varies them per epoch."""
    lengths = np.asarray(lengths, dtype=float)
    key = lengths + rng.uniform(0, 0.2 * max(1.0, lengths.mean()), size=len(lengths))
    order = np.argsort(key, kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def evaluate_items(model: QuantityTagger, items: Sequence[TaggerItem]) -> dict:
    """Span scores plus mean NLL on gold-tagged items, from one batched pass."""
    logits = model.logits(items)
    total = SpanCounts()
    for it, pred in zip(items, model.predict_items(items, logits)):
        total = total.add(span_counts(pred, it.gold))
    scores = total.scores()
    nll = [crfmod.nll_loss(L, it.tags, model.crf, accumulate=False)[0]
           for L, it in zip(logits, items) if L is not None]
    scores["loss"] = float(np.mean(nll)) if nll else 0.0
    return scores


def train_tagger(train: Corpus, dev: Optional[Corpus], enc_cfg: EncoderConfig, hyper: TaggerHyper,
                 on_epoch: Optional[Callable[[dict], None]] = None):
    """Train with Adam on mean CRF NLL; returns ``(best_dev_model, history)``."""
    if not any(d.of_kind(QUANTITY) for d in train):
        raise ValueError("training corpus has no Quantity annotations")
    if dev is None:
        train, dev = split_dev(train, hyper.dev_fraction, hyper.seed)
    train_items = [make_item(d, hyper.max_len) for d in train if d.document.text.strip()]
    dev_items = [make_item(d, hyper.max_len) for d in dev]
    train_items = [it for it in train_items if it.tokens]
    model = QuantityTagger.create(enc_cfg, train_items, hyper.seed, hyper.constrained)
    params = model.params()
    frozen = () if hyper.boundary else (model.crf.start, model.crf.end, model.crf.W_start)
    opt = Adam([p for p in params if p not in frozen], lr=hyper.lr, clip_norm=hyper.clip_norm)
    rng = np.random.default_rng(hyper.seed + 1)

    empty = {"overlap_f1": 0.0, "loss": 0.0}
    scores = evaluate_items(model, dev_items) if dev_items else empty
    best = (scores["overlap_f1"], snapshot(params))
    history = [{"epoch": 0, "train_loss": None, "dev_loss": scores["loss"],
                "dev_f1": scores["overlap_f1"]}]
    if on_epoch:
        on_epoch(history[-1])
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.time()
        total = 0.0
        for batch in length_batches([len(it.tokens) for it in train_items], hyper.batch_size, rng):
            opt.zero_grad()
            total += model.batch_loss([train_items[i] for i in batch], rng=rng)
            opt.step()
        for p in params:
            p.check_finite()
        scores = evaluate_items(model, dev_items) if dev_items else empty
        record = {"epoch": epoch, "train_loss": total / max(1, len(train_items)),
                  "dev_loss": scores["loss"], "dev_f1": scores["overlap_f1"],
                  "seconds": round(time.time() - t0, 3)}
        if not np.isfinite(record["train_loss"]):
            raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
        history.append(record)
        log.info("quantity epoch %d loss %.4f dev F1 %.4f", epoch, record["train_loss"], record["dev_f1"])
        if on_epoch:
            on_epoch(record)
        if scores["overlap_f1"] > best[0]:
            best = (scores["overlap_f1"], snapshot(params))
    assign_params(params, best[1])
    return model, history
