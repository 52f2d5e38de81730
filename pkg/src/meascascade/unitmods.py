"""Character-level models over a quantity's surface string.

Unit extraction tags each character O/B/I and keeps the first B I* run.
Modifier classification mean-pools BiLSTM states over the characters and
applies an independent sigmoid per label.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import B, I, O, QUANTITY, Corpus, Span
from .encoder import Vocab
from .errors import TrainingDiverged
from .metrics import harmonic
from .netcore import (
    Adam, Embedding, Linear, StackedBiLSTM, assign_params, load_params, save_params, sigmoid,
    sigmoid_bce, snapshot, softmax_xent,
)

log = logging.getLogger(__name__)

DEFAULT_LABELS = (
    "IsCount", "IsApproximate", "IsMean", "IsMedian", "IsRange", "IsList",
    "HasTolerance", "IsMeanHasTolerance", "IsMeanHasSD", "IsRangeHasTolerance", "Other",
)


@dataclass
class UnitModsHyper:
    epochs: int = 25
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 17
    char_embed_dim: int = 32
    hidden: int = 64
    layers: int = 2
    threshold: float = 0.5
    shared_trunk: bool = False
    labels: tuple = DEFAULT_LABELS
    clip_norm: float = 5.0
    dev_fraction: float = 0.1


@dataclass
class QuantityRecord:
    surface: str
    unit: Optional[str] = None
    mods: tuple = ()
    # unit location inside the surface; None when absent or not spelled out
    unit_span: Optional[Span] = None
    unit_in_surface: bool = True


@dataclass
class ModifierSet:
    labels: frozenset
    probabilities: np.ndarray


def locate_unit(surface: str, unit: Optional[str]) -> Optional[Span]:
    """First occurrence of ``unit`` in ``surface`` not glued to other letters."""
    if not unit:
        return None
    pattern = r"(?<![^\W\d_])" + re.escape(unit) + r"(?![^\W\d_])"
    m = re.search(pattern, surface)
    return Span(m.start(), m.end()) if m else None


def make_record(surface: str, unit: Optional[str], mods: Sequence[str]) -> QuantityRecord:
    span = locate_unit(surface, unit)
    return QuantityRecord(surface, unit, tuple(mods), span, unit is None or span is not None)


def records_from_corpus(corpus: Corpus) -> list[QuantityRecord]:
    out = []
    for doc in corpus:
        for a in doc.of_kind(QUANTITY):
            unit = a.payload.unit if a.payload else None
            mods = a.payload.mods if a.payload else ()
            out.append(make_record(a.surface, unit, mods))
    return out


def coverage_report(records: Sequence[QuantityRecord]) -> dict:
    with_unit = [r for r in records if r.unit]
    missing = [r for r in with_unit if not r.unit_in_surface]
    return {"records": len(records), "with_unit": len(with_unit),
            "unit_not_in_surface": len(missing),
            "examples": [(r.surface, r.unit) for r in missing[:5]]}


def char_tags(rec: QuantityRecord) -> list[int]:
    tags = [O] * len(rec.surface)
    if rec.unit_span is not None:
        tags[rec.unit_span.start] = B
        for i in range(rec.unit_span.start + 1, rec.unit_span.end):
            tags[i] = I
    return tags


def first_run(tags: Sequence[int]) -> Optional[Span]:
    for i, t in enumerate(tags):
        if t == B:
            j = i + 1
            while j < len(tags) and tags[j] == I:
                j += 1
            return Span(i, j)
    return None


class _Trunk:
    def __init__(self, name, n_chars, hyper: UnitModsHyper, rng):
        self.emb = Embedding(f"{name}/char", n_chars, hyper.char_embed_dim, rng)
        self.rnn = StackedBiLSTM(f"{name}/rnn", hyper.char_embed_dim, hyper.hidden, hyper.layers, rng)

    def params(self):
        return self.emb.params() + self.rnn.params()

    def forward(self, ids, lengths):
        x, ec = self.emb.forward(ids)
        h, rc = self.rnn.forward(x, lengths)
        return h, (ec, rc)

    def backward(self, dh, cache):
        ec, rc = cache
        self.emb.backward(self.rnn.backward(dh, rc), ec)


class UnitModsModel:
    def __init__(self, chars: Vocab, hyper: UnitModsHyper, rng: np.random.Generator):
        self.chars, self.hyper = chars, hyper
        self.labels = tuple(hyper.labels)
        self.unit_trunk = _Trunk("unit", len(chars), hyper, rng)
        self.mods_trunk = None if hyper.shared_trunk else _Trunk("mods", len(chars), hyper, rng)
        dim = 2 * hyper.hidden
        self.unit_head = Linear("unit/head", dim, 3, rng)
        self.mods_head = Linear("mods/head", dim, len(self.labels), rng)

    def params(self):
        ps = self.unit_trunk.params() + self.unit_head.params() + self.mods_head.params()
        if self.mods_trunk is not None:
            ps += self.mods_trunk.params()
        return ps

    def _ids(self, surfaces: Sequence[str]):
        lengths = np.array([len(s) for s in surfaces])
        if lengths.min() < 1:
            raise ValueError("quantity surface must be non-empty")
        ids = np.zeros((len(surfaces), lengths.max()), dtype=np.int64)
        for i, s in enumerate(surfaces):
            ids[i, :len(s)] = [self.chars.id(c) for c in s]
        return ids, lengths

    def forward(self, surfaces: Sequence[str]):
        ids, lengths = self._ids(surfaces)
        valid = (np.arange(ids.shape[1])[None, :] < lengths[:, None]).astype(float)
        hu, cu = self.unit_trunk.forward(ids, lengths)
        unit_logits, uh = self.unit_head.forward(hu)
        if self.mods_trunk is None:
            hm, cm = hu, None
        else:
            hm, cm = self.mods_trunk.forward(ids, lengths)
        pooled = (hm * valid[..., None]).sum(axis=1) / lengths[:, None]
        mods_logits, mh = self.mods_head.forward(pooled)
        return unit_logits, mods_logits, (lengths, valid, cu, uh, cm, mh)

    def backward(self, d_unit, d_mods, cache):
        lengths, valid, cu, uh, cm, mh = cache
        dhu = self.unit_head.backward(d_unit, uh)
        dpool = self.mods_head.backward(d_mods, mh)
        dhm = (dpool / lengths[:, None])[:, None, :] * valid[..., None]
        if self.mods_trunk is None:
            self.unit_trunk.backward(dhu + dhm, cu)
        else:
            self.unit_trunk.backward(dhu, cu)
            self.mods_trunk.backward(dhm, cm)

    def loss(self, records: Sequence[QuantityRecord], backward=True) -> float:
        """Unit char cross-entropy plus label-mean BCE, averaged over records."""
        unit_logits, mods_logits, cache = self.forward([r.surface for r in records])
        n, steps = unit_logits.shape[:2]
        tags = np.zeros((n, steps), dtype=np.int64)
        mask = np.zeros((n, steps))
        for b, r in enumerate(records):
            if r.unit_in_surface:
                tags[b, :len(r.surface)] = char_tags(r)
                mask[b, :len(r.surface)] = 1.0
        lu, du = softmax_xent(unit_logits, tags, mask)
        target = np.array([[lbl in r.mods for lbl in self.labels] for r in records], dtype=float)
        lm, dm = sigmoid_bce(mods_logits, target)
        k = len(self.labels)
        if backward:
            self.backward(du / n, dm / (n * k), cache)
        return (lu + lm / k) / n

    def predict(self, surfaces: Sequence[str]):
        """Returns ``[(unit string or None, unit Span or None, ModifierSet), ...]``."""
        if not surfaces:
            return []
        unit_logits, mods_logits, (lengths, *_rest) = self.forward(surfaces)
        probs = sigmoid(mods_logits)
        out = []
        for b, s in enumerate(surfaces):
            tags = np.argmax(unit_logits[b, :lengths[b]], axis=-1).tolist()
            span = first_run(tags)
            unit = s[span.start:span.end] if span else None
            chosen = frozenset(l for l, p in zip(self.labels, probs[b]) if p > self.hyper.threshold)
            out.append((unit, span, ModifierSet(chosen, probs[b])))
        return out

    def extract_unit(self, surface: str):
        unit, span, _ = self.predict([surface])[0]
        return (unit, span) if unit is not None else None

    def classify_mods(self, surface: str) -> ModifierSet:
        return self.predict([surface])[0][2]

    def save(self, directory: str | Path, prefix="unitmods"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_params(directory / f"{prefix}.mprm", self.params())
        meta = {"hyper": asdict(self.hyper), "chars": self.chars.itos}
        meta["hyper"]["labels"] = list(self.labels)
        (directory / f"{prefix}.json").write_text(json.dumps(meta, sort_keys=True, ensure_ascii=False))

    @classmethod
    def load(cls, directory: str | Path, prefix="unitmods") -> "UnitModsModel":
        directory = Path(directory)
        meta = json.loads((directory / f"{prefix}.json").read_text())
        hyper = UnitModsHyper(**meta["hyper"])
        hyper.labels = tuple(hyper.labels)
        model = cls(Vocab(meta["chars"]), hyper, np.random.default_rng(0))
        assign_params(model.params(), load_params(directory / f"{prefix}.mprm"))
        return model


def evaluate_records(model: UnitModsModel, records: Sequence[QuantityRecord], batch_size=64) -> dict:
    """Unit exact match, unit char-span F1 and modifier micro P/R/F1."""
    if not records:
        return {"unit_exact": 1.0, "unit_f1": 1.0, "mods_precision": 1.0, "mods_recall": 1.0,
                "mods_f1": 1.0, "score": 1.0}
    preds = []
    for k in range(0, len(records), batch_size):
        preds += model.predict([r.surface for r in records[k:k + batch_size]])
    exact = tp_u = n_pred_u = n_gold_u = 0
    tp = fp = fn = 0
    for r, (unit, span, mods) in zip(records, preds):
        exact += unit == r.unit
        n_pred_u += span is not None
        n_gold_u += r.unit_span is not None
        tp_u += span is not None and span == r.unit_span
        gold = set(r.mods)
        tp += len(mods.labels & gold)
        fp += len(mods.labels - gold)
        fn += len(gold - mods.labels)
    up = tp_u / n_pred_u if n_pred_u else float(n_gold_u == 0)
    ur = tp_u / n_gold_u if n_gold_u else float(n_pred_u == 0)
    mp = tp / (tp + fp) if tp + fp else float(fn == 0)
    mr = tp / (tp + fn) if tp + fn else 1.0
    out = {"unit_exact": exact / len(records), "unit_f1": harmonic(up, ur),
           "mods_precision": mp, "mods_recall": mr, "mods_f1": harmonic(mp, mr)}
    out["score"] = (out["unit_f1"] + out["mods_f1"]) / 2
    return out


def train_unitmods(train: Sequence[QuantityRecord], dev: Optional[Sequence[QuantityRecord]],
                   hyper: UnitModsHyper, on_epoch: Optional[Callable[[dict], None]] = None):
    """Adam on the joint loss; returns ``(best_dev_model, history)``."""
    train = list(train)
    if not any(r.unit or r.mods for r in train):
        raise ValueError("no record carries a unit or modifier label")
    rng = np.random.default_rng(hyper.seed)
    if dev is None:
        perm = rng.permutation(len(train))
        n_dev = max(1, int(round(hyper.dev_fraction * len(train)))) if len(train) > 1 else 0
        dev = [train[i] for i in perm[:n_dev]]
        train = [train[i] for i in perm[n_dev:]]
    chars = Vocab.build(r.surface for r in train)
    model = UnitModsModel(chars, hyper, rng)
    params = model.params()
    opt = Adam(params, lr=hyper.lr, clip_norm=hyper.clip_norm)
    scores = evaluate_records(model, dev)
    best = (scores["score"], snapshot(params))
    history = [{"epoch": 0, "train_loss": None, **scores}]
    if on_epoch:
        on_epoch(history[-1])
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.time()
        order = rng.permutation(len(train))
        total = 0.0
        for k in range(0, len(order), hyper.batch_size):
            batch = [train[i] for i in order[k:k + hyper.batch_size]]
            opt.zero_grad()
            total += model.loss(batch) * len(batch)
            opt.step()
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite unit/mods loss at epoch {epoch}")
        scores = evaluate_records(model, dev)
        record = {"epoch": epoch, "train_loss": float(total / len(train)), **scores,
                  "seconds": round(time.time() - t0, 3)}
        history.append(record)
        log.info("unitmods epoch %d loss %.4f unit %.4f mods %.4f", epoch, record["train_loss"],
                 scores["unit_exact"], scores["mods_f1"])
        if on_epoch:
            on_epoch(record)
        if scores["score"] > best[0]:
            best = (scores["score"], snapshot(params))
    assign_params(params, best[1])
    return model, history
