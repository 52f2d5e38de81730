"""Linear-chain CRF whose pairwise potential weights the current emission.

Moving from tag ``y'`` to ``y`` at position ``i`` scores
``W_trans[y', y] * l_i[y] + b_trans[y', y]``. Position 0 has no predecessor,
so it scores ``W_start[y] * l_0[y] + start[y]``; the final tag adds
``end[y]``. With the boundary terms zeroed and ``W_start`` at one this is the
plain pairwise model; the normalizer is always recomputed, never stored.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import I, O
from .errors import DimensionMismatch, InvalidIob
from .netcore import Param, logsumexp

NEG_INF = -np.inf


class CrfParams:
    def __init__(self, num_tags: int = 3, name: str = "crf", init: str = "default"):
        k = num_tags
        self.num_tags = k
        one = 0.0 if init == "zeros" else 1.0
        self.W_trans = Param(f"{name}/W_trans", np.full((k, k), one))
        self.b_trans = Param(f"{name}/b_trans", np.zeros((k, k)))
        self.W_start = Param(f"{name}/W_start", np.full(k, one))
        self.start = Param(f"{name}/start", np.zeros(k))
        self.end = Param(f"{name}/end", np.zeros(k))

    @classmethod
    def from_arrays(cls, W_trans, b_trans, start, end, W_start=None) -> "CrfParams":
        W_trans = np.asarray(W_trans, dtype=float)
        crf = cls(W_trans.shape[0], init="zeros")
        crf.W_trans.value[...] = W_trans
        crf.b_trans.value[...] = b_trans
        crf.start.value[...] = start
        crf.end.value[...] = end
        crf.W_start.value[...] = 1.0 if W_start is None else W_start
        return crf

    def params(self):
        return [self.W_trans, self.b_trans, self.W_start, self.start, self.end]


def iob_masks(num_tags: int = 3):
    """Additive masks forbidding O->I and start->I."""
    trans = np.zeros((num_tags, num_tags))
    trans[O, I] = NEG_INF
    start = np.zeros(num_tags)
    start[I] = NEG_INF
    return trans, start


def _check(l, crf: CrfParams):
    l = np.asarray(l, dtype=float)
    if l.ndim != 2 or l.shape[0] < 1 or l.shape[1] != crf.num_tags:
        raise DimensionMismatch(f"logits shape {l.shape} incompatible with {crf.num_tags} tags")
    return l


def _pairwise(l, crf: CrfParams):
    """psi[..., i, y', y] for positions i >= 1."""
    return crf.W_trans.value * l[..., 1:, None, :] + crf.b_trans.value


def _first(l, crf: CrfParams):
    return crf.W_start.value * l[..., 0, :] + crf.start.value


def sequence_score(l, tags: Sequence[int], crf: CrfParams) -> float:
    l = _check(l, crf)
    tags = np.asarray(tags)
    if tags.shape != (l.shape[0],) or tags.min() < 0 or tags.max() >= crf.num_tags:
        raise DimensionMismatch("tags must have one in-range entry per position")
    score = _first(l, crf)[tags[0]] + crf.end.value[tags[-1]]
    if len(tags) > 1:
        psi = _pairwise(l, crf)
        score += psi[np.arange(len(tags) - 1), tags[:-1], tags[1:]].sum()
    return float(score)


def log_partition(l, crf: CrfParams) -> float:
    l = _check(l, crf)
    alpha = _first(l, crf)
    psi = _pairwise(l, crf)
    for i in range(psi.shape[0]):
        alpha = logsumexp(alpha[:, None] + psi[i], axis=0)
    return float(logsumexp(alpha + crf.end.value))


def nll_batch(L, tags, lengths, crf: CrfParams, accumulate=True, scale=1.0):
    """Summed negative log-likelihood over a right-padded batch.

    ``L``: [batch, steps, k] emissions; ``tags``: [batch, steps] gold tags.
    Returns ``(loss, dL)`` and, when ``accumulate``, adds parameter gradients
    into the CRF's accumulators. Every gradient is multiplied by ``scale``
    (use ``1 / batch`` for a mean loss). Gradients are marginals minus gold counts,
    obtained from the forward-backward recursions.
    """
    L = np.asarray(L, dtype=float)
    tags = np.asarray(tags)
    lengths = np.asarray(lengths)
    batch, steps, k = L.shape
    if k != crf.num_tags:
        raise DimensionMismatch(f"emission width {k} != {crf.num_tags}")
    bidx = np.arange(batch)
    last = lengths - 1
    psi = _pairwise(L, crf)                       # [b, steps-1, k, k]
    valid = np.arange(steps)[None, :] < lengths[:, None]   # [b, steps]

    alphas = np.empty((batch, steps, k))
    alphas[:, 0] = _first(L, crf)
    for i in range(1, steps):
        step = logsumexp(alphas[:, i - 1, :, None] + psi[:, i - 1], axis=1)
        alphas[:, i] = np.where(valid[:, i, None], step, alphas[:, i - 1])
    end = crf.end.value
    log_z = logsumexp(alphas[bidx, last] + end, axis=-1)

    betas = np.zeros((batch, steps, k))
    betas[bidx, last] = end
    for i in range(steps - 2, -1, -1):
        step = logsumexp(psi[:, i] + betas[:, i + 1, None, :], axis=2)
        inner = (i < last)[:, None]
        betas[:, i] = np.where(inner, step, betas[:, i])

    gold_first = _first(L, crf)[bidx, tags[:, 0]]
    gold_end = end[tags[bidx, last]]
    gold_pairs = np.zeros(batch)
    if steps > 1:
        pair_scores = psi[bidx[:, None], np.arange(steps - 1)[None, :], tags[:, :-1], tags[:, 1:]]
        gold_pairs = (pair_scores * valid[:, 1:]).sum(axis=1)
    loss = float(np.sum(log_z - gold_first - gold_pairs - gold_end))

    dL = np.zeros_like(L)
    # position 0 marginals
    p0 = np.exp(alphas[:, 0] + betas[:, 0] - log_z[:, None])
    g0 = p0.copy()
    g0[bidx, tags[:, 0]] -= 1.0
    dL[:, 0] = g0 * crf.W_start.value
    pend = np.exp(alphas[bidx, last] + end - log_z[:, None])
    gend = pend.copy()
    gend[bidx, tags[bidx, last]] -= 1.0

    if steps > 1:
        pair = np.exp(alphas[:, :-1, :, None] + psi + betas[:, 1:, None, :] - log_z[:, None, None, None])
        pair *= valid[:, 1:, None, None]
        gold_ind = np.zeros_like(pair)
        bi, ti = np.nonzero(valid[:, 1:])
        gold_ind[bi, ti, tags[bi, ti], tags[bi, ti + 1]] = 1.0
        dpsi = pair - gold_ind
        dL[:, 1:] = np.einsum("btij,ij->btj", dpsi, crf.W_trans.value)
    if accumulate:
        crf.start.grad += scale * g0.sum(axis=0)
        crf.W_start.grad += scale * (g0 * L[:, 0]).sum(axis=0)
        crf.end.grad += scale * gend.sum(axis=0)
        if steps > 1:
            crf.b_trans.grad += scale * dpsi.sum(axis=(0, 1))
            crf.W_trans.grad += scale * np.einsum("btij,btj->ij", dpsi, L[:, 1:])
    return loss, dL * scale


def nll_loss(l, gold_tags, crf: CrfParams, accumulate=True):
    """Single-sequence NLL; returns ``(loss, dl)``."""
    l = _check(l, crf)
    gold = np.asarray(gold_tags)
    if gold.shape != (l.shape[0],) or gold.min() < 0 or gold.max() >= crf.num_tags:
        raise InvalidIob("gold tags must have one in-range entry per position")
    loss, dL = nll_batch(l[None], gold[None], np.array([l.shape[0]]), crf, accumulate)
    return loss, dL[0]


def viterbi(l, crf: CrfParams, constrained: bool = True, return_score: bool = False):
    """Highest-scoring tag path; ties resolve to the lowest tag index.

    ``constrained`` masks O->I and start->I so the output is valid IOB
    (only meaningful for the three-tag O/B/I layout).
    """
    l = _check(l, crf)
    n, k = l.shape
    first = _first(l, crf)
    psi = _pairwise(l, crf)
    if constrained and k == 3:
        mtrans, mstart = iob_masks(k)
        first = first + mstart
        psi = psi + mtrans
    delta = first
    back = np.zeros((n, k), dtype=np.int64)
    for i in range(1, n):
        cand = delta[:, None] + psi[i - 1]
        back[i] = np.argmax(cand, axis=0)
        delta = cand[back[i], np.arange(k)]
    final = delta + crf.end.value
    best = int(np.argmax(final))
    path = [best]
    for i in range(n - 1, 0, -1):
        best = int(back[i, best])
        path.append(best)
    path.reverse()
    if return_score:
        return path, float(final.max())
    return path
