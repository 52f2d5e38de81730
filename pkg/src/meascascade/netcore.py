"""Small reverse-mode neural network toolkit on numpy (float64 throughout).

Each layer exposes ``forward`` returning ``(output, cache)`` and ``backward``
taking the upstream gradient plus that cache; parameter gradients are
accumulated into :class:`Param.grad`. Sequences are batched right-padded with
an explicit length vector, and recurrent layers never let padding leak into
valid positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptySequence, MissingCheckpoint, TrainingDiverged

DTYPE = np.float64


class Param:
    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def check_finite(self):
        if not np.all(np.isfinite(self.value)):
            raise TrainingDiverged(f"parameter {self.name} became non-finite")

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsumexp(x, axis=-1, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(x, axis=-1):
    return x - logsumexp(x, axis=axis, keepdims=True)


# ---------------------------------------------------------------- layers

class Embedding:
    def __init__(self, name: str, num: int, dim: int, rng: np.random.Generator):
        # unit-variance rows; a fan-in rule would shrink them with vocabulary size
        bound = np.sqrt(3.0 / dim)
        self.W = Param(f"{name}/W", rng.uniform(-bound, bound, size=(num, dim)))

    @property
    def dim(self):
        return self.W.shape[1]

    def params(self):
        return [self.W]

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return self.W.value[ids], ids

    def backward(self, dout, ids):
        np.add.at(self.W.grad, ids.ravel(), dout.reshape(-1, self.dim))


class Linear:
    """``y = x @ W + b`` with W stored as ``[d_in, d_out]``; optional ReLU."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator, relu=False):
        self.W = Param(f"{name}/W", uniform_init(rng, (d_in, d_out), d_in))
        self.b = Param(f"{name}/b", np.zeros(d_out))
        self.relu = relu

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.W.shape[0]:
            raise DimensionMismatch(f"input dim {x.shape[-1]} != {self.W.shape[0]}")
        z = x @ self.W.value + self.b.value
        if self.relu:
            active = z > 0
            return z * active, (x, active)
        return z, (x, None)

    def backward(self, dy, cache):
        x, active = cache
        if active is not None:
            # subgradient 0 at the kink
            dy = dy * active
        d_in, d_out = self.W.shape
        self.W.grad += x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
        self.b.grad += dy.reshape(-1, d_out).sum(axis=0)
        return dy @ self.W.value.T


def linear_forward(x, W, b, relu=False):
    """Stateless ``W^T x + b`` (ReLU-clamped when ``relu``) for plain arrays."""
    x, W, b = (np.asarray(a, dtype=DTYPE) for a in (x, W, b))
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[-1]:
        raise DimensionMismatch(f"x{x.shape} W{W.shape} b{b.shape}")
    z = x @ W + b
    return np.where(z > 0, z, 0.0) if relu else z


def reverse_padded(x, lengths):
    """Reverse each row's first ``lengths[b]`` steps, leaving padding in place.

    The permutation is its own inverse, so the same call maps gradients back.
    """
    batch, steps = x.shape[:2]
    t = np.arange(steps)[None, :]
    lens = np.asarray(lengths)[:, None]
    idx = np.where(t < lens, lens - 1 - t, t)
    return x[np.arange(batch)[:, None], idx]


class LSTM:
    """Single-direction LSTM; gate order is input, forget, cell, output."""

    def __init__(self, name: str, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        h = hidden_dim
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.Wx = Param(f"{name}/Wx", uniform_init(rng, (input_dim, 4 * h), input_dim))
        self.Wh = Param(f"{name}/Wh", uniform_init(rng, (h, 4 * h), h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        self.b = Param(f"{name}/b", b)

    def params(self):
        return [self.Wx, self.Wh, self.b]

    def _gate_affine(self):
        # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so one tanh evaluates all four gates
        H = self.hidden_dim
        scale = np.full(4 * H, 0.5)
        scale[2 * H:3 * H] = 1.0
        shift = np.full(4 * H, 0.5)
        shift[2 * H:3 * H] = 0.0
        return scale, shift

    def forward(self, x, lengths=None):
        """``x``: [batch, steps, input_dim] -> hidden states [batch, steps, hidden].

        With ``lengths`` the batch is packed: rows are sorted by length and
        each step only updates the rows still running, so padding costs
        nothing and padded outputs are exactly zero.
        """
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 3 or x.shape[1] == 0:
            raise EmptySequence("LSTM needs a non-empty [batch, steps, dim] input")
        if x.shape[2] != self.input_dim:
            raise DimensionMismatch(f"input dim {x.shape[2]} != {self.input_dim}")
        batch, steps, _ = x.shape
        lengths = np.full(batch, steps) if lengths is None else np.asarray(lengths)
        order = np.argsort(-lengths, kind="stable")
        active = (lengths[order][:, None] > np.arange(steps)[None, :]).sum(axis=0)
        # time-major copies keep every per-step slice contiguous
        x = np.ascontiguousarray(x[order].transpose(1, 0, 2))
        H = self.hidden_dim
        scale, shift = self._gate_affine()
        # pre-scaled so the loop only needs tanh
        Wh = self.Wh.value * scale
        xw = (x @ self.Wx.value + self.b.value) * scale
        hs = np.zeros((steps, batch, H))
        cs = np.zeros((steps, batch, H))
        tcs = np.zeros((steps, batch, H))
        gates = np.zeros((steps, batch, 4 * H))
        h = np.zeros((batch, H))
        c = np.zeros((batch, H))
        for t in range(steps):
            n = active[t]
            # sorted rows: the running set is a prefix that only shrinks
            g = gates[t, :n]
            np.dot(h[:n], Wh, out=g)
            g += xw[t, :n]
            np.tanh(g, out=g)
            g *= scale
            g += shift
            c = cs[t, :n]
            np.multiply(g[:, H:2 * H], cs[t - 1, :n] if t else 0.0, out=c)
            c += g[:, :H] * g[:, 2 * H:3 * H]
            tc = tcs[t, :n]
            np.tanh(c, out=tc)
            h = hs[t, :n]
            np.multiply(g[:, 3 * H:], tc, out=h)
        out = hs.transpose(1, 0, 2)[np.argsort(order)]
        return out, (x, hs, cs, tcs, gates, order, active)

    def backward(self, dhs, cache):
        x, hs, cs, tcs, gates, order, active = cache
        dhs = np.ascontiguousarray(dhs[order].transpose(1, 0, 2))
        steps, batch, _ = x.shape
        H = self.hidden_dim
        WhT = self.Wh.value.T.copy()
        # local derivative of each gate w.r.t. its pre-activation
        deriv = gates * (1.0 - gates)
        deriv[..., 2 * H:3 * H] = 1.0 - gates[..., 2 * H:3 * H] ** 2
        c_prev = np.concatenate([np.zeros((1, batch, H)), cs[:-1]], axis=0)
        # per-step multipliers: dz = [dc*g, dc*c_prev, dc*i, dh*tanh(c)] * deriv
        dc_mult = np.concatenate([gates[..., 2 * H:3 * H], c_prev, gates[..., :H]], axis=-1)
        dc_mult *= deriv[..., :3 * H]
        dh_mult = tcs * deriv[..., 3 * H:]
        o_dtc = gates[..., 3 * H:] * (1.0 - tcs * tcs)
        f = gates[..., H:2 * H]
        dz_all = np.zeros_like(gates)
        dh_next = np.zeros((batch, H))
        dc_next = np.zeros((batch, H))
        for t in range(steps - 1, -1, -1):
            n = active[t]
            dh = dhs[t, :n] + dh_next[:n]
            dc = dc_next[:n] + dh * o_dtc[t, :n]
            dz = dz_all[t, :n]
            dz[:, :3 * H] = np.tile(dc, 3) * dc_mult[t, :n]
            np.multiply(dh, dh_mult[t, :n], out=dz[:, 3 * H:])
            np.dot(dz, WhT, out=dh_next[:n])
            np.multiply(dc, f[t, :n], out=dc_next[:n])
        h_prev = np.concatenate([np.zeros((1, batch, H)), hs[:-1]], axis=0)
        dz_flat = dz_all.reshape(-1, 4 * H)
        self.Wh.grad += h_prev.reshape(-1, H).T @ dz_flat
        self.Wx.grad += x.reshape(-1, self.input_dim).T @ dz_flat
        self.b.grad += dz_flat.sum(axis=0)
        dx = (dz_all @ self.Wx.value.T).transpose(1, 0, 2)
        return dx[np.argsort(order)]


class BiLSTM:
    """Forward and backward LSTMs over right-padded batches, outputs concatenated."""

    def __init__(self, name: str, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.fwd = LSTM(f"{name}/fwd", input_dim, hidden_dim, rng)
        self.bwd = LSTM(f"{name}/bwd", input_dim, hidden_dim, rng)
        self.hidden_dim = hidden_dim

    @property
    def output_dim(self):
        return 2 * self.hidden_dim

    def params(self):
        return self.fwd.params() + self.bwd.params()

    def forward(self, x, lengths=None):
        if lengths is None:
            lengths = np.full(len(x), np.shape(x)[1])
        hf, cf = self.fwd.forward(x, lengths)
        hb, cb = self.bwd.forward(reverse_padded(x, lengths), lengths)
        return np.concatenate([hf, reverse_padded(hb, lengths)], axis=-1), (cf, cb, lengths)

    def backward(self, dout, cache):
        cf, cb, lengths = cache
        H = self.hidden_dim
        dx = self.fwd.backward(dout[..., :H], cf)
        dx += reverse_padded(self.bwd.backward(reverse_padded(dout[..., H:], lengths), cb), lengths)
        return dx


class StackedBiLSTM:
    def __init__(self, name: str, input_dim: int, hidden_dim: int, layers: int,
                 rng: np.random.Generator):
        self.layers = []
        dim = input_dim
        for k in range(layers):
            self.layers.append(BiLSTM(f"{name}/l{k}", dim, hidden_dim, rng))
            dim = 2 * hidden_dim

    @property
    def output_dim(self):
        return self.layers[-1].output_dim

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, lengths=None):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, lengths)
            caches.append(c)
        return x, caches

    def backward(self, dout, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dout = layer.backward(dout, c)
        return dout


def lstm_forward(seq: Sequence, lstm: LSTM, direction: str = "forward") -> np.ndarray:
    """Run one LSTM over a single unbatched sequence of vectors."""
    if len(seq) == 0:
        raise EmptySequence("lstm_forward needs at least one step")
    x = np.asarray(seq, dtype=DTYPE)[None]
    if direction == "backward":
        return lstm.forward(x[:, ::-1])[0][0, ::-1]
    return lstm.forward(x)[0][0]


def bilstm_forward(seq: Sequence, layers: Sequence[BiLSTM]) -> np.ndarray:
    if len(seq) == 0:
        raise EmptySequence("bilstm_forward needs at least one step")
    x = np.asarray(seq, dtype=DTYPE)[None]
    lengths = np.array([x.shape[1]])
    for layer in layers:
        x = layer.forward(x, lengths)[0]
    return x[0]


# ---------------------------------------------------------------- losses

def softmax_xent(logits, targets, mask=None):
    """Summed cross-entropy over rows of ``logits[..., C]`` and its gradient.

    ``mask`` (same leading shape as ``targets``) marks which rows count; masked
    logits entries of -inf are allowed in non-target columns.
    """
    logp = log_softmax(logits, axis=-1)
    targets = np.asarray(targets)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = np.ones_like(picked) if mask is None else np.asarray(mask, dtype=DTYPE)
    loss = -(picked * w).sum()
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None],
                      np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    grad *= w[..., None]
    return loss, grad


def sigmoid_bce(logits, targets):
    """Summed binary cross-entropy with logits, numerically stable."""
    z = np.asarray(logits, dtype=DTYPE)
    y = np.asarray(targets, dtype=DTYPE)
    loss = np.sum(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    return loss, sigmoid(z) - y


# ---------------------------------------------------------------- optimizer

def clip_global_norm(params: Sequence[Param], max_norm: float) -> float:
    norm = float(np.sqrt(sum(np.sum(p.grad * p.grad) for p in params)))
    if not np.isfinite(norm):
        raise TrainingDiverged("non-finite gradient norm")
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


class Adam:
    """Bias-corrected Adam; zeroes gradients after each step."""

    def __init__(self, params: Sequence[Param], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm: Optional[float] = 5.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        if self.clip_norm is not None:
            clip_global_norm(self.params, self.clip_norm)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(update)):
                raise TrainingDiverged(f"non-finite Adam update for {p.name}")
            p.value -= update
            p.zero_grad()


def adam_step(params: Sequence[Param], state: Adam) -> Sequence[Param]:
    state.step()
    return params


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(loss_fn: Callable[[], float], params: Sequence[Param], h=1e-5, tol=1e-4,
               max_per_param: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               floor=1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` must zero the gradients, run forward and backward, and return
    the scalar loss. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    Central differences at ``h = 1e-5`` carry rounding noise near
    ``1e-16 * |loss| / h``, so entries smaller than ``floor`` are compared
    on an absolute scale.
    """
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst, worst_name, checked = 0.0, "", 0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn()
            flat[k] = orig - h
            down = loss_fn()
            flat[k] = orig
            num = (up - down) / (2 * h)
            a = g.reshape(-1)[k]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{p.name}[{k}]"
    loss_fn()
    return GradCheckReport(float(worst), worst_name, checked, tol)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MPRM"
VERSION = 1


def save_params(path: str | Path, params: Iterable[Param] | dict) -> None:
    """Binary container: magic, u32 version, u32 count, then named f64 arrays."""
    items = params.items() if isinstance(params, dict) else ((p.name, p.value) for p in params)
    items = [(name, np.asarray(v, dtype="<f8")) for name, v in items]
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(str(path))
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter container")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out


def assign_params(params: Iterable[Param], values: dict) -> None:
    for p in params:
        if p.name not in values:
            raise KeyError(f"checkpoint lacks {p.name}")
        if values[p.name].shape != p.shape:
            raise DimensionMismatch(f"{p.name}: checkpoint shape {values[p.name].shape} != {p.shape}")
        p.value[...] = values[p.name]


def snapshot(params: Iterable[Param]) -> dict:
    return {p.name: p.value.copy() for p in params}
