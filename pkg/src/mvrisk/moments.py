"""Streaming first/second/third cross-moments of per-view loss vectors.

Loss vectors reach the accumulator as a *stream*: a zero-argument callable
returning an iterable of ``(H0, H1, H2)`` chunks, each of shape (n_chunk, D_v).
Keeping the stream around lets the decomposition run a second pass for
whitened third-moment contractions instead of materializing a D^3 tensor.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateScaleError, InputError, NumericError
from .models import N_VIEWS

PAIRS = ((0, 1), (0, 2), (1, 2))
DENSE_CAP = 64
MAGIC = b"MVMS"
VERSION = 1

LossStream = Callable[[], Iterable[tuple]]


def _tree_sum(parts):
    """Pairwise reduction of a list of equally-shaped partial sums."""
    parts = list(parts)
    if not parts:
        raise InputError("nothing to reduce")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _chain(first, second):
    def stream():
        yield from first()
        yield from second()
    return stream


@dataclass
class MomentSet:
    """Empirical (or population) moments of the three loss-vector views.

    ``triple`` is the dense D0 x D1 x D2 tensor when every D_v is at most the
    dense cap; otherwise it is None and ``stream`` re-reads the data.
    """

    m: int
    first: tuple
    pairs: dict
    triple: Optional[np.ndarray] = None
    stream: Optional[LossStream] = field(default=None, repr=False)
    sq_norm: float = float("nan")
    k: Optional[int] = None

    @property
    def dims(self):
        return tuple(int(f.shape[0]) for f in self.first)

    @property
    def tau(self):
        """Loss scale: root mean of sum_{v,j} f_v(x_v, j)^2."""
        return float(np.sqrt(self.sq_norm))

    def pair(self, v, w):
        """E[h_v h_w^T]; either view order works."""
        if v == w:
            raise InputError("pair moments are only defined for distinct views")
        if (v, w) in self.pairs:
            return self.pairs[(v, w)]
        return self.pairs[(w, v)].T

    def contract_triple(self, A0, A1, A2):
        """Mean of (H0 A0) (x) (H1 A1) (x) (H2 A2); each A_v is D_v x r_v."""
        if self.triple is not None:
            return np.einsum("abc,ai,bj,ck->ijk", self.triple, A0, A1, A2, optimize=True)
        if self.stream is None:
            raise InputError("third moment unavailable: no dense tensor and no data stream")
        parts = []
        for H0, H1, H2 in self.stream():
            U0, U1, U2 = H0 @ A0, H1 @ A1, H2 @ A2
            parts.append(np.einsum("ni,nj,nk->ijk", U0, U1, U2, optimize=True))
        return _tree_sum(parts) / self.m

    def merge(self, other):
        """Size-weighted combination with a MomentSet from disjoint samples."""
        if self.dims != other.dims:
            raise InputError("cannot merge moment sets of different dimensions")
        m = self.m + other.m
        a, b = self.m / m, other.m / m
        first = tuple(a * f + b * g for f, g in zip(self.first, other.first))
        pairs = {key: a * self.pairs[key] + b * other.pairs[key] for key in PAIRS}
        triple = None
        if self.triple is not None and other.triple is not None:
            triple = a * self.triple + b * other.triple
        stream = None
        if self.stream is not None and other.stream is not None:
            stream = _chain(self.stream, other.stream)
        return MomentSet(m, first, pairs, triple, stream,
                         a * self.sq_norm + b * other.sq_norm, self.k)

    def to_bytes(self):
        k = self.k if self.k is not None else 0
        head = MAGIC + struct.pack("<I I 3I Q B d", VERSION, k, *self.dims, self.m,
                                   int(self.triple is not None), self.sq_norm)
        body = [np.ascontiguousarray(f, dtype="<f8").tobytes() for f in self.first]
        body += [np.ascontiguousarray(self.pairs[key], dtype="<f8").tobytes() for key in PAIRS]
        if self.triple is not None:
            body.append(np.ascontiguousarray(self.triple, dtype="<f8").tobytes())
        return head + b"".join(body)

    @classmethod
    def from_bytes(cls, buf):
        fmt = "<I I 3I Q B d"
        size = struct.calcsize(fmt)
        if len(buf) < 4 + size or buf[:4] != MAGIC:
            raise InputError("not a moment file (bad magic)")
        version, k, d0, d1, d2, m, has_triple, sq = struct.unpack(fmt, buf[4:4 + size])
        if version != VERSION:
            raise InputError(f"unsupported moment file version {version}")
        dims = (d0, d1, d2)
        pos = 4 + size

        def take(shape):
            nonlocal pos
            n = int(np.prod(shape)) * 8
            if pos + n > len(buf):
                raise InputError("truncated moment file")
            out = np.frombuffer(buf[pos:pos + n], dtype="<f8").reshape(shape).astype(float)
            pos += n
            return out

        first = tuple(take((dv,)) for dv in dims)
        pairs = {(v, w): take((dims[v], dims[w])) for v, w in PAIRS}
        triple = take(dims) if has_triple else None
        return cls(int(m), first, pairs, triple, None, sq, k or None)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class ScaleConstants:
    tau: float
    B: float

    @property
    def ratio(self):
        """tau / B, the factor applied to gradient blocks of extended features."""
        if not self.B > 0:
            raise DegenerateScaleError("feature scale B is zero")
        return self.tau / self.B


def _chunk_sums(chunk, offset, dense):
    H = [np.asarray(h, dtype=float) for h in chunk]
    n = H[0].shape[0]
    if any(h.ndim != 2 or h.shape[0] != n for h in H):
        raise InputError("loss-vector chunk views disagree in sample count")
    for h in H:
        bad = ~np.all(np.isfinite(h), axis=1)
        if bad.any():
            idx = offset + int(np.argmax(bad))
            raise NumericError(f"non-finite loss value at sample {idx}", index=idx)
    out = {
        "n": n,
        "first": [h.sum(axis=0) for h in H],
        "pairs": [H[v].T @ H[w] for v, w in PAIRS],
        "sq": float(sum(np.einsum("ij,ij->", h, h) for h in H)),
    }
    if dense:
        # one matrix product: H0^T (H1 (x) H2) row-wise, reshaped to D0 x D1 x D2
        d1, d2 = H[1].shape[1], H[2].shape[1]
        outer = (H[1][:, :, None] * H[2][:, None, :]).reshape(n, d1 * d2)
        out["triple"] = (H[0].T @ outer).reshape(H[0].shape[1], d1, d2)
    return out


def _reduce(partials, dense):
    m = sum(p["n"] for p in partials)
    first = tuple(_tree_sum([p["first"][v] for p in partials]) / m for v in range(N_VIEWS))
    pairs = {key: _tree_sum([p["pairs"][i] for p in partials]) / m
             for i, key in enumerate(PAIRS)}
    sq = _tree_sum([p["sq"] for p in partials]) / m
    triple = _tree_sum([p["triple"] for p in partials]) / m if dense else None
    return m, first, pairs, triple, sq


def accumulate_stream(stream: LossStream, *, dense_cap=DENSE_CAP, k=None, jobs=1):
    """Moments of every chunk produced by ``stream``.

    The dense third moment is formed only when max D_v <= ``dense_cap``;
    otherwise the stream is kept for later contractions.
    """
    chunks = iter(stream())
    first = next(chunks, None)
    if first is None or np.shape(first[0])[0] == 0:
        raise InputError("no samples to accumulate")
    dims = [np.shape(h)[1] for h in first]
    dense = max(dims) <= dense_cap

    def all_chunks():
        yield first
        yield from chunks

    if jobs > 1:
        materialized = list(all_chunks())
        offsets = np.cumsum([0] + [np.shape(c[0])[0] for c in materialized])
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            partials = list(pool.map(lambda i: _chunk_sums(materialized[i], offsets[i], dense),
                                     range(len(materialized))))
    else:
        partials, offset = [], 0
        for chunk in all_chunks():
            partials.append(_chunk_sums(chunk, offset, dense))
            offset += partials[-1]["n"]
    m, first_m, pairs, triple, sq = _reduce(partials, dense)
    return MomentSet(m, first_m, pairs, triple, None if dense else stream, sq, k)


def array_stream(H, chunk_size=4096):
    """Stream over in-memory loss vectors H = (H0, H1, H2)."""
    H = [np.asarray(h, dtype=float) for h in H]
    n = H[0].shape[0]

    def stream():
        for s in range(0, n, chunk_size):
            yield tuple(h[s:s + chunk_size] for h in H)
    return stream


def _n_samples(samples):
    if len(samples) != N_VIEWS:
        raise InputError("samples must be split into three views")
    n = np.shape(samples[0])[0]
    if any(np.shape(x)[0] != n for x in samples):
        raise InputError("views have different sample counts")
    return n


def normalize_views(h):
    """Subtract the per-sample log-sum-exp from a loss-vector block.

    For softmax-type models the shift moves into the base term and leaves the
    loss unchanged, while removing the rank deficiency of centred weights.
    Returns the shifted block and the shifts.
    """
    c = logsumexp(h, axis=1)
    return h - c[:, None], c


def model_stream(samples, model, theta=None, chunk_size=4096, normalize=False):
    """Stream of the model's loss vectors over unlabelled samples."""
    n = _n_samples(samples)

    def view(x, v):
        h = model.loss_vectors(x, v, theta)
        return normalize_views(h)[0] if normalize else h

    def stream():
        for s in range(0, n, chunk_size):
            yield tuple(view(samples[v][s:s + chunk_size], v) for v in range(N_VIEWS))
    return stream


def accumulate_moments(samples, model, *, theta=None, chunk_size=4096,
                       dense_cap=DENSE_CAP, jobs=1, normalize=False):
    """One streaming pass over unlabelled samples through the model's loss vectors."""
    if _n_samples(samples) == 0:
        raise InputError("empty sample set")
    return accumulate_stream(model_stream(samples, model, theta, chunk_size, normalize),
                             dense_cap=dense_cap, k=model.k, jobs=jobs)


def population_moments(M, pi):
    """Exact moments implied by conditional means M_v (D_v x k) and prior pi."""
    M = [np.asarray(Mv, dtype=float) for Mv in M]
    pi = np.asarray(pi, dtype=float)
    first = tuple(Mv @ pi for Mv in M)
    pairs = {(v, w): (M[v] * pi) @ M[w].T for v, w in PAIRS}
    triple = np.einsum("j,aj,bj,cj->abc", pi, M[0], M[1], M[2])
    return MomentSet(1, first, pairs, triple, None, float("nan"), len(pi))


def extended_loss_vectors(model, theta0, theta, x_v, v, ratio, with_gradient=True,
                          normalize=False):
    """Stack h_v at theta0 over ratio * d f_v(theta; x_v, i)/d theta_r at index k + i + k*r."""
    h = model.loss_vectors(x_v, v, theta0)
    if normalize:
        h = normalize_views(h)[0]
    if not with_gradient or model.d == 0:
        return h
    g = model.grad_loss_vectors(x_v, v, theta)
    n, k, d = g.shape
    return np.concatenate([h, ratio * g.transpose(0, 2, 1).reshape(n, d * k)], axis=1)


def extended_feature(model, theta0, theta, x_v, v, scale: ScaleConstants, with_gradient=True):
    """Extended loss vector h'_v for a single view input."""
    ratio = scale.ratio if with_gradient and model.d else 0.0
    return extended_loss_vectors(model, theta0, theta, x_v, v, ratio, with_gradient)[0]


def extended_stream(samples, model, theta0, theta, ratio, chunk_size=1024, normalize=False):
    n = _n_samples(samples)

    def stream():
        for s in range(0, n, chunk_size):
            yield tuple(extended_loss_vectors(model, theta0, theta, samples[v][s:s + chunk_size],
                                              v, ratio, normalize=normalize)
                        for v in range(N_VIEWS))
    return stream


def estimate_scale_constants(samples, model, theta0=None, chunk_size=2048):
    """Plug-in tau (loss scale) and B (feature/gradient scale) at theta0."""
    n = _n_samples(samples)
    if n == 0:
        raise InputError("empty sample set")
    loss_sq, grad_sq = [], []
    for s in range(0, n, chunk_size):
        for v in range(N_VIEWS):
            x = samples[v][s:s + chunk_size]
            h = model.loss_vectors(x, v, theta0)
            loss_sq.append(float(np.einsum("ij,ij->", h, h)))
            g = model.grad_loss_vectors(x, v, theta0)
            grad_sq.append(float(np.einsum("nkd,nkd->", g, g)))
    return ScaleConstants(float(np.sqrt(_tree_sum(loss_sq) / n)),
                          float(np.sqrt(_tree_sum(grad_sq) / n)))
