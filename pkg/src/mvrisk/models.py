"""View-decomposed losses L(theta; x, y) = A(theta; x) - sum_v f_v(theta; x_v, y).

Three built-in families are provided:

* ``logistic`` -- log-linear model, f_v = theta . phi_v(x_v, y), A = log-partition.
* ``modified-hinge`` -- a hinge loss applied separately per view, A = 0.
* ``additive-scorer`` -- arbitrary per-view score vectors added before a softmax.

An ``exponential`` kind (f_v = exp(-theta . phi_v), L = prod_v f_v) is also
available for product-form risk estimation; it does not satisfy the additive
identity and ``base_term`` is zero for it.

Views are indexed 0, 1, 2. Batch methods take arrays with a leading sample
axis; the module-level helpers (``loss_vector`` etc.) take single inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import InputError, NumericError

N_VIEWS = 3
KINDS = ("logistic", "modified-hinge", "additive-scorer", "exponential")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def _check_view(v):
    if v not in (0, 1, 2):
        raise InputError(f"view index must be 0, 1 or 2, got {v!r}")


def _check_finite(a, what):
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        idx = int(np.argwhere(~np.isfinite(a))[0][0]) if a.ndim else None
        raise NumericError(f"non-finite {what} (sample {idx})", index=idx)


@dataclass(frozen=True)
class BlockFeatures:
    """Dense per-class block embedding.

    theta is read as a (k, width) weight matrix W with ``width = sum(view_dims) + bias``.
    phi_v(x_v, i) places x_v at row i, columns ``offset(v) .. offset(v) + view_dims[v]``.
    The bias column (last) is attached to view 0.
    """

    k: int
    view_dims: tuple
    bias: bool = False

    def __post_init__(self):
        if self.k < 2:
            raise InputError("k must be >= 2")
        if len(self.view_dims) != N_VIEWS or any(int(p) < 0 for p in self.view_dims):
            raise InputError(f"view_dims must be three non-negative ints, got {self.view_dims}")
        object.__setattr__(self, "view_dims", tuple(int(p) for p in self.view_dims))

    @property
    def width(self):
        return sum(self.view_dims) + int(self.bias)

    @property
    def d(self):
        return self.k * self.width

    def offset(self, v):
        return sum(self.view_dims[:v])

    def _as_batch(self, x_v, v):
        x = np.asarray(x_v, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1) if x.size else x.reshape(1, 0)
        if x.ndim != 2 or x.shape[1] != self.view_dims[v]:
            raise InputError(
                f"view {v} expects {self.view_dims[v]} features, got shape {np.shape(x_v)}")
        _check_finite(x, f"features in view {v}")
        return x

    def scores(self, theta, x_v, v):
        """theta . phi_v(x_v, i) for every class i, shape (n, k)."""
        x = self._as_batch(x_v, v)
        W = np.reshape(theta, (self.k, self.width))
        off = self.offset(v)
        s = x @ W[:, off:off + self.view_dims[v]].T
        if self.bias and v == 0:
            s = s + W[:, -1]
        return s

    def features(self, x_v, v):
        """phi_v(x_v, i) as an (n, k, d) array."""
        x = self._as_batch(x_v, v)
        n, p, off = x.shape[0], self.view_dims[v], self.offset(v)
        out = np.zeros((n, self.k, self.k, self.width))
        for i in range(self.k):
            out[:, i, i, off:off + p] = x
            if self.bias and v == 0:
                out[:, i, i, -1] = 1.0
        return out.reshape(n, self.k, self.d)

    def full_input(self, views):
        """Concatenate views (plus the bias column) into an (n, width) array."""
        parts = [self._as_batch(views[v], v) for v in range(N_VIEWS)]
        n = parts[0].shape[0]
        if any(p.shape[0] != n for p in parts):
            raise InputError("views have different sample counts")
        if self.bias:
            parts.append(np.ones((n, 1)))
        return np.concatenate(parts, axis=1)

    def weighted_sum(self, weights, views):
        """sum_i w_i sum_v phi_v(x_v, i) for (n, k) weights, shape (n, d)."""
        x = self.full_input(views)
        return (weights[:, :, None] * x[:, None, :]).reshape(x.shape[0], self.d)

    def to_dict(self):
        return {"view_dims": list(self.view_dims), "bias": self.bias}


class ViewLossModel:
    """Common surface of every model. Instances are immutable."""

    kind: str
    k: int
    theta: np.ndarray

    @property
    def d(self):
        return int(self.theta.size)

    @property
    def view_dims(self):
        raise NotImplementedError

    def _theta(self, theta):
        if theta is None:
            return self.theta
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.d,):
            raise InputError(f"theta must have shape ({self.d},), got {theta.shape}")
        return theta

    def loss_vectors(self, x_v, v, theta=None):
        """h_v(x_v) = (f_v(theta; x_v, i))_i for a batch, shape (n, k)."""
        raise NotImplementedError

    def base_term(self, views, theta=None):
        """A(theta; x) for a batch, shape (n,)."""
        raise NotImplementedError

    def grad_loss_vectors(self, x_v, v, theta=None):
        """d f_v(theta; x_v, i) / d theta_r as (n, k, d)."""
        raise NotImplementedError

    def grad_base_term(self, views, theta=None):
        """d A(theta; x) / d theta as (n, d)."""
        raise NotImplementedError

    def all_loss_vectors(self, views, theta=None):
        return [self.loss_vectors(views[v], v, theta) for v in range(N_VIEWS)]

    def loss(self, views, y, theta=None):
        """L(theta; x, y) for a batch of labelled samples."""
        y = np.asarray(y, dtype=int)
        H = self.all_loss_vectors(views, theta)
        rows = np.arange(y.shape[0])
        return self.base_term(views, theta) - sum(h[rows, y] for h in H)

    def class_log_probs(self, views, theta=None):
        """log p_theta(j | x) for softmax-type models, shape (n, k)."""
        H = self.all_loss_vectors(views, theta)
        s = sum(H)
        return s - logsumexp(s, axis=1, keepdims=True)

    def with_theta(self, theta):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


class LinearViewModel(ViewLossModel):
    """Models whose per-view scores are linear in theta: logistic, modified hinge, exponential."""

    def __init__(self, kind, features: BlockFeatures, theta=None):
        if kind not in ("logistic", "modified-hinge", "exponential"):
            raise InputError(f"unknown linear model kind {kind!r}")
        self.kind = kind
        self.features = features
        self.k = features.k
        theta = np.zeros(features.d) if theta is None else np.asarray(theta, dtype=float)
        if theta.shape != (features.d,):
            raise InputError(f"theta must have length d={features.d}, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise NumericError("non-finite theta")
        self.theta = _frozen(theta)

    @property
    def view_dims(self):
        return self.features.view_dims

    def __repr__(self):
        return f"LinearViewModel(kind={self.kind!r}, k={self.k}, view_dims={self.view_dims}, d={self.d})"

    def with_theta(self, theta):
        return LinearViewModel(self.kind, self.features, theta)

    def scores(self, x_v, v, theta=None):
        _check_view(v)
        return self.features.scores(self._theta(theta), x_v, v)

    def loss_vectors(self, x_v, v, theta=None):
        s = self.scores(x_v, v, theta)
        if self.kind == "logistic":
            out = s
        elif self.kind == "exponential":
            out = np.exp(-s)
        else:
            out = -np.maximum(1.0 + _max_other(s) - s, 0.0)
        _check_finite(out, f"loss values in view {v}")
        return out

    def base_term(self, views, theta=None):
        n = np.shape(views[0])[0]
        if self.kind != "logistic":
            return np.zeros(n)
        total = sum(self.scores(views[v], v, theta) for v in range(N_VIEWS))
        return logsumexp(total, axis=1)

    def grad_loss_vectors(self, x_v, v, theta=None):
        _check_view(v)
        phi = self.features.features(x_v, v)
        if self.kind == "logistic":
            return phi
        s = self.scores(x_v, v, theta)
        if self.kind == "exponential":
            return -np.exp(-s)[:, :, None] * phi
        # Modified hinge: f_i = -(1 + s_j* - s_i)_+ ; subgradient 0 on the flat side and at the kink.
        n, k = s.shape
        other = _argmax_other(s)
        active = (1.0 + _max_other(s) - s) > 0.0
        rows = np.arange(n)[:, None]
        g = phi - phi[rows, other]
        return np.where(active[:, :, None], g, 0.0)

    def grad_base_term(self, views, theta=None):
        n = np.shape(views[0])[0]
        if self.kind != "logistic":
            return np.zeros((n, self.d))
        total = sum(self.scores(views[v], v, theta) for v in range(N_VIEWS))
        return self.features.weighted_sum(softmax(total, axis=1), views)

    def loss(self, views, y, theta=None):
        if self.kind != "exponential":
            return super().loss(views, y, theta)
        y = np.asarray(y, dtype=int)
        rows = np.arange(y.shape[0])
        out = np.ones(y.shape[0])
        for v in range(N_VIEWS):
            out = out * self.loss_vectors(views[v], v, theta)[rows, y]
        return out

    def mean_features(self, views, y):
        """sum_v phi_v(x_v, y) averaged over labelled samples (the labelled phi-bar)."""
        y = np.asarray(y, dtype=int)
        onehot = np.eye(self.k)[y]
        return self.features.weighted_sum(onehot, views).mean(axis=0)

    def to_dict(self):
        return {"kind": self.kind, "k": self.k, "d": self.d,
                **self.features.to_dict(), "theta": self.theta.tolist()}


def _max_other(s):
    """max_{j != i} s_j for each i."""
    k = s.shape[1]
    out = np.empty_like(s)
    for i in range(k):
        out[:, i] = np.max(np.delete(s, i, axis=1), axis=1)
    return out


def _argmax_other(s):
    k = s.shape[1]
    out = np.empty(s.shape, dtype=int)
    for i in range(k):
        cols = [j for j in range(k) if j != i]
        out[:, i] = np.asarray(cols)[np.argmax(s[:, cols], axis=1)]
    return out


ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class AdditiveScorerModel(ViewLossModel):
    """Per-view score functions whose outputs are summed and passed through a softmax.

    ``score_fns[v](theta_v, x_v)`` returns (n, k) scores using the view's slice of
    theta. Gradients use ``grad_fns`` when given, else central differences.
    """

    kind = "additive-scorer"

    def __init__(self, k, score_fns: Sequence[ScoreFn], param_dims, theta,
                 grad_fns=None, view_dims=(None, None, None), tables=None):
        if k < 2:
            raise InputError("k must be >= 2")
        if len(score_fns) != N_VIEWS or len(param_dims) != N_VIEWS:
            raise InputError("need exactly three score functions")
        self.k = int(k)
        self._score_fns = tuple(score_fns)
        self._grad_fns = tuple(grad_fns) if grad_fns is not None else None
        self.param_dims = tuple(int(p) for p in param_dims)
        self._view_dims = tuple(view_dims)
        self._tables = tables
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (sum(self.param_dims),):
            raise InputError("theta length does not match param_dims")
        self.theta = _frozen(theta)

    @classmethod
    def from_tables(cls, tables):
        """Score tables S_v of shape (n_v, k); view input is an integer row index."""
        tables = [np.asarray(t, dtype=float) for t in tables]
        k = tables[0].shape[1]
        if any(t.ndim != 2 or t.shape[1] != k for t in tables):
            raise InputError("score tables must be 2-D with a common class count")
        shapes = [t.shape for t in tables]

        def make_score(shape):
            def score(theta_v, x_v):
                idx = np.asarray(x_v, dtype=int).reshape(-1)
                if idx.size and (idx.min() < 0 or idx.max() >= shape[0]):
                    raise InputError("table index out of range")
                return np.reshape(theta_v, shape)[idx]
            return score

        def make_grad(shape):
            def grad(theta_v, x_v):
                idx = np.asarray(x_v, dtype=int).reshape(-1)
                g = np.zeros((idx.size, shape[1], shape[0] * shape[1]))
                for i in range(shape[1]):
                    g[np.arange(idx.size), i, idx * shape[1] + i] = 1.0
                return g
            return grad

        theta = np.concatenate([t.ravel() for t in tables])
        return cls(k, [make_score(s) for s in shapes], [t.size for t in tables], theta,
                   grad_fns=[make_grad(s) for s in shapes], view_dims=(1, 1, 1),
                   tables=shapes)

    @property
    def view_dims(self):
        return self._view_dims

    def _split(self, theta):
        theta = self._theta(theta)
        cuts = np.cumsum((0,) + self.param_dims)
        return [theta[cuts[v]:cuts[v + 1]] for v in range(N_VIEWS)], cuts

    def with_theta(self, theta):
        return AdditiveScorerModel(self.k, self._score_fns, self.param_dims, theta,
                                   self._grad_fns, self._view_dims, self._tables)

    def loss_vectors(self, x_v, v, theta=None):
        _check_view(v)
        parts, _ = self._split(theta)
        s = np.asarray(self._score_fns[v](parts[v], x_v), dtype=float)
        if s.ndim != 2 or s.shape[1] != self.k:
            raise InputError(f"score function for view {v} must return (n, {self.k})")
        _check_finite(s, f"scores in view {v}")
        return s

    def base_term(self, views, theta=None):
        return logsumexp(sum(self.loss_vectors(views[v], v, theta) for v in range(N_VIEWS)), axis=1)

    def grad_loss_vectors(self, x_v, v, theta=None, step=1e-6):
        _check_view(v)
        parts, cuts = self._split(theta)
        if self._grad_fns is not None:
            gv = np.asarray(self._grad_fns[v](parts[v], x_v), dtype=float)
        else:
            gv = _central_diff(lambda t: self._score_fns[v](t, x_v), parts[v], step)
        out = np.zeros(gv.shape[:2] + (self.d,))
        out[:, :, cuts[v]:cuts[v + 1]] = gv
        return out

    def grad_base_term(self, views, theta=None):
        total = sum(self.loss_vectors(views[v], v, theta) for v in range(N_VIEWS))
        p = softmax(total, axis=1)
        return sum(np.einsum("ni,nid->nd", p, self.grad_loss_vectors(views[v], v, theta))
                   for v in range(N_VIEWS))

    def to_dict(self):
        if self._tables is None:
            raise InputError("only table-backed scorers are serializable")
        parts, _ = self._split(None)
        return {"kind": self.kind, "k": self.k, "d": self.d,
                "tables": [p.reshape(s).tolist() for p, s in zip(parts, self._tables)]}


def _central_diff(fn, theta, step):
    base = np.asarray(fn(theta), dtype=float)
    g = np.zeros(base.shape + (theta.size,))
    for r in range(theta.size):
        e = np.zeros_like(theta)
        e[r] = step
        g[..., r] = (np.asarray(fn(theta + e)) - np.asarray(fn(theta - e))) / (2 * step)
    return g


def build_builtin_model(kind, k, view_dims=None, theta=None, *, bias=False, tables=None):
    """Instantiate one of the built-in model families."""
    if kind == "additive-scorer":
        if tables is None:
            raise InputError("additive-scorer needs score tables")
        model = AdditiveScorerModel.from_tables(tables)
        if model.k != k:
            raise InputError(f"tables have {model.k} classes, expected {k}")
        if theta is not None:
            model = model.with_theta(theta)
        return model
    if kind not in KINDS:
        raise InputError(f"unknown model kind {kind!r}")
    if view_dims is None:
        raise InputError("view_dims required")
    return LinearViewModel(kind, BlockFeatures(k, tuple(view_dims), bias), theta)


def model_from_dict(doc):
    kind = doc.get("kind")
    if kind == "additive-scorer":
        return build_builtin_model(kind, doc["k"], tables=doc["tables"])
    model = build_builtin_model(kind, doc["k"], doc["view_dims"], doc.get("theta"),
                                bias=bool(doc.get("bias", False)))
    if "d" in doc and doc["d"] != model.d:
        raise InputError(f"descriptor d={doc['d']} disagrees with dimensions (d={model.d})")
    return model


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def loss_vector(model, x_v, v):
    """Loss vector h_v(x_v) for one view input."""
    return model.loss_vectors(x_v, v)[0]


def base_term(model, x):
    """A(theta; x) for one input split into three views."""
    if len(x) != N_VIEWS:
        raise InputError("input must split into three views")
    batched = [np.asarray(xv)[None, ...] if np.ndim(xv) <= 1 else np.asarray(xv) for xv in x]
    return float(model.base_term(batched)[0])


def grad_loss_vector(model, x_v, v):
    """k x d matrix whose row i is the theta-gradient of f_v(theta; x_v, i)."""
    return model.grad_loss_vectors(x_v, v)[0]
