"""Recover conditional means M_v and the class prior pi from loss-vector moments.

Pipeline: cross-view symmetrization of views 0 and 1 onto view 2, whitening,
robust tensor power iteration with deflation, back-projection, pi from the
first moment of view 0, then optional weighted least-squares refinement and
split-sample amplification.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import AmplificationError, IllConditionedError, InputError, NumericError
from .matching import column_alignment
from .moments import PAIRS, MomentSet, accumulate_moments, accumulate_stream, array_stream

log = logging.getLogger(__name__)


@dataclass
class DecompositionConfig:
    restarts: int = 25
    iterations: int = 100
    refine: bool = False
    refine_max_iter: int = 500
    splits: int = 1
    seed: int = 0
    rank_tol: float = 1e-10
    amplify_eps: float = 0.1
    dense_cap: int = 64
    chunk_size: int = 4096
    min_samples: int = 1
    normalize_views: Optional[bool] = None    # None: on for softmax-type models

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown decomposition config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


@dataclass
class Whitening:
    W: np.ndarray       # D2 x k, W^T Pairs3 W = I
    T: np.ndarray       # k x k x k symmetric
    C1: np.ndarray      # D2 x D0
    C2: np.ndarray      # D2 x D1
    pairs3: np.ndarray


@dataclass
class TensorEigenpairs:
    values: np.ndarray   # (k,)
    vectors: np.ndarray  # (k, k), column j is the j-th unit eigenvector
    residual: np.ndarray = field(repr=False, default=None)


@dataclass
class PlugInEstimate:
    M: tuple
    pi: np.ndarray
    eigenvalues: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)
    residual: float = float("nan")
    refined: bool = False
    warnings: list = field(default_factory=list)

    @property
    def k(self):
        return int(self.pi.shape[0])

    def permuted(self, perm):
        """Reorder columns so that new column j is old column perm[j]."""
        perm = np.asarray(perm, dtype=int)
        ev = None if self.eigenvalues is None else self.eigenvalues[perm]
        return replace(self, M=tuple(Mv[:, perm] for Mv in self.M), pi=self.pi[perm],
                       eigenvalues=ev, warnings=list(self.warnings))

    def to_dict(self):
        return {
            "M": [Mv.tolist() for Mv in self.M],
            "pi": self.pi.tolist(),
            "eigenvalues": None if self.eigenvalues is None else self.eigenvalues.tolist(),
            "diagnostics": _jsonable(self.diagnostics),
            "residual": self.residual,
            "refined": self.refined,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, doc):
        ev = doc.get("eigenvalues")
        return cls(tuple(np.asarray(Mv, dtype=float) for Mv in doc["M"]),
                   np.asarray(doc["pi"], dtype=float),
                   None if ev is None else np.asarray(ev, dtype=float),
                   dict(doc.get("diagnostics", {})), float(doc.get("residual", float("nan"))),
                   bool(doc.get("refined", False)), list(doc.get("warnings", [])))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# -- linear algebra helpers ---------------------------------------------------

def _truncated_pinv(A, k, rank_tol, stage):
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size < k or not s[k - 1] > rank_tol * s[0]:
        sk = float(s[k - 1]) if s.size >= k else 0.0
        raise IllConditionedError(
            f"{stage}: k-th singular value {sk:.3g} below tolerance", singular_value=sk, stage=stage)
    return (Vt[:k].T / s[:k]) @ U[:, :k].T


def _pinv(A, rank_tol):
    return np.linalg.pinv(A, rcond=rank_tol)


def _sigma_k(A, k):
    s = np.linalg.svd(A, compute_uv=False)
    return float(s[k - 1]) if s.size >= k else 0.0


def symmetrize_tensor(T):
    return sum(np.transpose(T, p) for p in itertools.permutations(range(3))) / 6.0


def _tensor_apply(T, u):
    """T(I, u, u)."""
    return np.einsum("ijk,j,k->i", T, u, u)


def _tensor_value(T, u):
    return float(np.einsum("ijk,i,j,k->", T, u, u, u))


# -- pipeline stages ----------------------------------------------------------

def symmetrize_and_whiten(moments: MomentSet, k, rank_tol=1e-10):
    """Map views 0 and 1 onto view 2, whiten the symmetrized second moment,
    and contract the third moment into a k x k x k symmetric tensor."""
    P01 = moments.pair(0, 1)
    C1 = moments.pair(2, 1) @ _truncated_pinv(P01, k, rank_tol, "pair[0,1]")
    C2 = moments.pair(2, 0) @ _truncated_pinv(P01.T, k, rank_tol, "pair[1,0]")
    cross = C1 @ P01 @ C2.T
    pairs3 = 0.5 * (cross + cross.T)
    evals, evecs = np.linalg.eigh(pairs3)
    order = np.argsort(evals)[::-1][:k]
    top = evals[order]
    if top.size < k or not top[-1] > rank_tol * max(top[0], 0.0):
        sk = float(top[-1]) if top.size else 0.0
        raise IllConditionedError(f"symmetrized second moment has k-th eigenvalue {sk:.3g}",
                                  singular_value=sk, stage="whitening")
    W = evecs[:, order] / np.sqrt(top)
    T = moments.contract_triple(C1.T @ W, C2.T @ W, W)
    return Whitening(W, symmetrize_tensor(T), C1, C2, pairs3)


def tensor_power_method(T, restarts=25, iterations=100, seed=0, k=None, sym_tol=1e-8):
    """Eigenpairs of a symmetric k x k x k tensor by power iteration with deflation."""
    T = np.array(T, dtype=float)
    if T.ndim != 3 or len(set(T.shape)) != 1:
        raise InputError(f"need a cubic tensor, got shape {T.shape}")
    scale = max(1.0, float(np.abs(T).max()))
    asym = max(float(np.abs(T - np.transpose(T, p)).max())
               for p in itertools.permutations(range(3)))
    if asym > sym_tol * scale:
        raise InputError(f"tensor is not symmetric (max deviation {asym:.3g})")
    n = T.shape[0]
    k = n if k is None else k
    rng = np.random.default_rng(seed)
    norm0 = float(np.linalg.norm(T))
    values, vectors = [], []
    for j in range(k):
        best_val, best_u = -np.inf, None
        for _ in range(restarts):
            u = rng.standard_normal(n)
            u /= np.linalg.norm(u)
            for _ in range(iterations):
                w = _tensor_apply(T, u)
                nw = np.linalg.norm(w)
                if nw == 0.0:
                    break
                u = w / nw
            val = _tensor_value(T, u)
            if val > best_val:
                best_val, best_u = val, u
        u = best_u
        for _ in range(iterations):
            w = _tensor_apply(T, u)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            u = w / nw
        lam = _tensor_value(T, u)
        if lam < 0:
            u, lam = -u, -lam
        if not lam > 1e-12 * max(norm0, 1e-300):
            raise NumericError(f"no positive tensor eigenvalue for component {j}",
                               stage="tensor_power_method")
        values.append(lam)
        vectors.append(u)
        T = T - lam * np.einsum("i,j,k->ijk", u, u, u)
    return TensorEigenpairs(np.asarray(values), np.column_stack(vectors), T)


def project_to_simplex(p):
    """Clip negatives to zero and renormalize."""
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    total = p.sum()
    if not total >= 0.5:
        raise NumericError(f"class prior estimate has clipped mass {total:.3g} < 0.5",
                           stage="prior")
    return p / total


def recover_parameters(eig: TensorEigenpairs, whitening: Whitening, moments: MomentSet,
                       rank_tol=1e-10):
    """Back-project eigenpairs to M_0, M_1, M_2 and the prior."""
    lam, V = eig.values, eig.vectors
    if np.any(lam <= 0):
        raise InputError("eigenvalues must be positive")
    k = lam.size
    W = whitening.W
    M2 = (W @ np.linalg.inv(W.T @ W)) @ V * lam
    if _sigma_k(M2, k) <= rank_tol * np.linalg.norm(M2, 2):
        raise IllConditionedError("recovered M for view 2 is singular",
                                  singular_value=_sigma_k(M2, k), stage="recover")
    pi_tilde = lam ** -2.0
    back = _pinv(pi_tilde[:, None] * M2.T, rank_tol)
    M0 = moments.pair(0, 2) @ back
    M1 = moments.pair(1, 2) @ back
    s0 = _sigma_k(M0, k)
    if s0 <= rank_tol * np.linalg.norm(M0, 2):
        raise IllConditionedError("recovered M for view 0 is singular", singular_value=s0,
                                  stage="recover")
    raw_pi = _pinv(M0, rank_tol) @ moments.first[0]
    pi = project_to_simplex(raw_pi)
    est = PlugInEstimate((M0, M1, M2), pi, lam.copy())
    est.diagnostics = _diagnostics(est, moments)
    est.diagnostics["pi_tilde"] = pi_tilde
    est.diagnostics["pi_raw"] = raw_pi
    est.residual = moment_residual(est, moments)
    return est


def _diagnostics(est, moments):
    k = est.k
    svals = [np.linalg.svd(Mv, compute_uv=False) for Mv in est.M]
    return {
        "lambda": float(min(s[k - 1] for s in svals)),
        "sigma_k": [float(s[k - 1]) for s in svals],
        "kappa": [float(s[0] / s[k - 1]) if s[k - 1] > 0 else float("inf") for s in svals],
        "pi_min": float(est.pi.min()),
        "tau": moments.tau,
        "m": moments.m,
    }


# -- refinement ---------------------------------------------------------------

def default_weights(k):
    return (1.0 / k, 1.0 / k ** 2, 1.0 / k ** 3)


class _Objective:
    """Weighted squared moment residual J(M, pi) and its gradient."""

    def __init__(self, moments: MomentSet, k, weights):
        self.mom = moments
        self.k = k
        self.w1, self.w2, self.w3 = weights
        if moments.triple is not None or self.w3 == 0:
            self.Q = None
            self.T = moments.triple
        else:
            # Project the third moment onto the top-k left singular spaces of the pairs.
            Q = []
            for v, w in ((0, 1), (1, 0), (2, 0)):
                U, _, _ = np.linalg.svd(moments.pair(v, w), full_matrices=False)
                Q.append(U[:, :k])
            self.Q = Q
            self.T = moments.contract_triple(*Q)

    def __call__(self, M, pi, need_grad=True):
        mom = self.mom
        J = 0.0
        gM = [np.zeros_like(Mv) for Mv in M]
        gpi = np.zeros_like(pi)
        for v in range(3):
            r = mom.first[v] - M[v] @ pi
            J += self.w1 * float(r @ r)
            if need_grad:
                gM[v] -= 2 * self.w1 * np.outer(r, pi)
                gpi -= 2 * self.w1 * (M[v].T @ r)
        for v, w in PAIRS:
            R = mom.pairs[(v, w)] - (M[v] * pi) @ M[w].T
            J += self.w2 * float(np.sum(R * R))
            if need_grad:
                gM[v] -= 2 * self.w2 * (R @ M[w]) * pi
                gM[w] -= 2 * self.w2 * (R.T @ M[v]) * pi
                gpi -= 2 * self.w2 * np.einsum("aj,ab,bj->j", M[v], R, M[w])
        if self.w3 and self.T is not None:
            A = M if self.Q is None else [Q.T @ Mv for Q, Mv in zip(self.Q, M)]
            R3 = self.T - np.einsum("j,aj,bj,cj->abc", pi, A[0], A[1], A[2], optimize=True)
            J += self.w3 * float(np.sum(R3 * R3))
            if need_grad:
                gA = [np.einsum("abc,bj,cj->aj", R3, A[1], A[2], optimize=True),
                      np.einsum("abc,aj,cj->bj", R3, A[0], A[2], optimize=True),
                      np.einsum("abc,aj,bj->cj", R3, A[0], A[1], optimize=True)]
                for v in range(3):
                    g = -2 * self.w3 * gA[v] * pi
                    gM[v] += g if self.Q is None else self.Q[v] @ g
                gpi -= 2 * self.w3 * np.einsum("abc,aj,bj,cj->j", R3, A[0], A[1], A[2],
                                               optimize=True)
        return J, gM, gpi


def moment_residual(est, moments, weights=None):
    weights = default_weights(est.k) if weights is None else weights
    J, _, _ = _Objective(moments, est.k, weights)(est.M, est.pi, need_grad=False)
    return J


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def refine(estimate: PlugInEstimate, moments: MomentSet, weights=None, max_iter=500,
           gtol=1e-13, armijo=1e-4):
    """Monotone local descent on the weighted moment residual.

    pi is parametrized by normalized exponentials, so every iterate stays on the
    simplex. Steps use a Barzilai-Borwein trial length with Armijo backtracking.
    """
    k = estimate.k
    weights = default_weights(k) if weights is None else tuple(weights)
    obj = _Objective(moments, k, weights)
    M = [Mv.copy() for Mv in estimate.M]
    z = np.log(np.clip(estimate.pi, 1e-12, None))
    z -= z.mean()

    def evaluate(M, z):
        pi = _softmax(z)
        J, gM, gpi = obj(M, pi)
        gz = pi * (gpi - pi @ gpi)
        return J, gM, gz

    J, gM, gz = evaluate(M, z)
    history = [J]
    warnings = []
    step = 1.0
    prev = None
    converged = False
    for it in range(max_iter):
        gnorm2 = sum(float(np.sum(g * g)) for g in gM) + float(gz @ gz)
        if gnorm2 <= gtol ** 2 or J == 0.0:
            converged = True
            break
        if prev is not None:
            dx = [a - b for a, b in zip(M + [z], prev[0])]
            dg = [a - b for a, b in zip(gM + [gz], prev[1])]
            sy = sum(float(np.sum(a * b)) for a, b in zip(dx, dg))
            ss = sum(float(np.sum(a * a)) for a in dx)
            if sy > 0:
                step = ss / sy
        accepted = False
        for _ in range(60):
            Mn = [Mv - step * g for Mv, g in zip(M, gM)]
            zn = z - step * gz
            Jn, gMn, gzn = evaluate(Mn, zn)
            if Jn <= J - armijo * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no representable descent left: stationary to machine precision
            converged = True
            break
        prev = (M + [z], gM + [gz])
        M, z, J, gM, gz = Mn, zn, Jn, gMn, gzn
        history.append(J)
    if not converged:
        warnings.append("refine_max_iter")
    out = PlugInEstimate(tuple(M), _softmax(z), estimate.eigenvalues,
                         dict(estimate.diagnostics), J, True,
                         list(estimate.warnings) + warnings)
    out.diagnostics.update(_diagnostics(out, moments))
    out.diagnostics["refine_history"] = history
    return out


# -- amplification ------------------------------------------------------------

def estimate_distance(a, b):
    """Distance between estimates after aligning b's columns to a's."""
    if not isinstance(a, PlugInEstimate):
        return abs(float(a) - float(b))
    perm = column_alignment(a.M, b.M)
    fro = np.sqrt(sum(float(np.sum((Ma - Mb[:, perm]) ** 2)) for Ma, Mb in zip(a.M, b.M)))
    return fro + float(np.max(np.abs(a.pi - b.pi[perm])))


def amplify(estimates, eps, distance=estimate_distance):
    """Keep estimates that are within 2*eps of at least half of the others;
    return the first survivor."""
    estimates = list(estimates)
    n = len(estimates)
    if n < 3:
        raise InputError("amplification needs at least 3 estimates")
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = distance(estimates[i], estimates[j])
    far = (D > 2 * eps).sum(axis=1)
    for i in range(n):
        if far[i] <= (n - 1) / 2:
            return estimates[i]
    raise AmplificationError(f"all {n} estimates were discarded at radius {eps}")


# -- driver -------------------------------------------------------------------

def decompose_moments(moments: MomentSet, k, config: DecompositionConfig = None):
    """Tensor decomposition of a single MomentSet."""
    config = config or DecompositionConfig()
    if k < 2:
        raise InputError("k must be >= 2")
    if min(moments.dims) < k:
        raise InputError(f"loss vectors have dimensions {moments.dims} < k={k}")
    stage = "whiten"
    try:
        wh = symmetrize_and_whiten(moments, k, config.rank_tol)
        stage = "tensor_power_method"
        eig = tensor_power_method(wh.T, config.restarts, config.iterations, config.seed)
        stage = "recover"
        est = recover_parameters(eig, wh, moments, config.rank_tol)
        if config.refine:
            stage = "refine"
            est = refine(est, moments, max_iter=config.refine_max_iter)
    except NumericError as exc:
        if exc.stage is None:
            exc.stage = stage
        raise
    est.diagnostics["stage_ok"] = True
    return est


def decompose_arrays(H, k, config: DecompositionConfig = None):
    """Decompose precomputed loss vectors H = (H0, H1, H2), each (m, D_v)."""
    config = config or DecompositionConfig()
    m = np.shape(H[0])[0]
    if m < config.min_samples:
        raise InputError(f"need at least {config.min_samples} samples, got {m}")
    if config.splits >= 3:
        bounds = np.linspace(0, m, config.splits + 1).astype(int)
        parts = [decompose_arrays([h[a:b] for h in H], k, replace(config, splits=1))
                 for a, b in zip(bounds[:-1], bounds[1:])]
        return amplify(parts, config.amplify_eps)
    mom = accumulate_stream(array_stream(H, config.chunk_size), dense_cap=config.dense_cap, k=k)
    return decompose_moments(mom, k, config)


SOFTMAX_KINDS = ("logistic", "additive-scorer")


def uses_view_normalization(model, config: DecompositionConfig = None):
    """Whether loss vectors are log-normalized per view before decomposition."""
    flag = None if config is None else config.normalize_views
    if flag is None:
        return model.kind in SOFTMAX_KINDS
    if flag and model.kind not in SOFTMAX_KINDS:
        raise InputError(f"view normalization changes the loss of a {model.kind} model")
    return bool(flag)


def decompose(samples, model, config: DecompositionConfig = None, theta=None):
    """Estimate (M_v, pi) for a model's loss vectors from unlabelled samples."""
    config = config or DecompositionConfig()
    if model.k < 2:
        raise InputError("k must be >= 2")
    m = np.shape(samples[0])[0]
    if m < config.min_samples:
        raise InputError(f"need at least {config.min_samples} samples, got {m}")
    if config.splits >= 3:
        bounds = np.linspace(0, m, config.splits + 1).astype(int)
        parts = [decompose([x[a:b] for x in samples], model, replace(config, splits=1), theta)
                 for a, b in zip(bounds[:-1], bounds[1:])]
        return amplify(parts, config.amplify_eps)
    mom = accumulate_moments(samples, model, theta=theta, chunk_size=config.chunk_size,
                             dense_cap=config.dense_cap, normalize=uses_view_normalization(model, config))
    return decompose_moments(mom, model.k, config)
