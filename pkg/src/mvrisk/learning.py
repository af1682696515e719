"""Unsupervised learning from a seed model.

The seed model fixes which recovered component is which class. Gradients of
the per-view terms are recovered jointly with the seed's loss vectors by
decomposing extended features, and drive either a one-shot constrained
logistic fit or a dual-averaging loop.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import softmax

from .decomposition import (DecompositionConfig, PlugInEstimate, decompose, decompose_moments,
                            uses_view_normalization)
from .errors import InputError, MvRiskError, NumericError
from .matching import best_permutation, permutation_gap
from .models import N_VIEWS, LinearViewModel
from .moments import (ScaleConstants, accumulate_stream, estimate_scale_constants,
                      extended_loss_vectors, normalize_views)

log = logging.getLogger(__name__)


@dataclass
class SeedContext:
    theta0: np.ndarray
    sigma0: tuple
    gap: float
    diagnostics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


@dataclass
class LearnConfig:
    rho: float = 10.0
    eta: float = 0.1
    steps: int = 10
    m: Optional[int] = None          # samples per gradient estimate; None uses all
    seed: int = 0
    gap_threshold: float = 1e-3
    tol: float = 1e-9                # first-order tolerance of the constrained solver
    max_iter: int = 100
    cache_seed_block: bool = False
    method: str = "logistic"

    def __post_init__(self):
        if not self.rho > 0 or not self.eta > 0:
            raise InputError("rho and eta must be positive")
        if self.steps < 0:
            raise InputError("steps must be >= 0")
        if self.method not in ("logistic", "general"):
            raise InputError(f"unknown learning method {self.method!r}")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown learn config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


@dataclass
class GradientMoments:
    G: tuple                 # per view, (d*k, k) with row i + k*r
    pi: np.ndarray
    M: tuple                 # per view, loss-vector block at theta0, class aligned
    phi: np.ndarray
    sigma: tuple
    diagnostics: dict = field(default_factory=dict)

    def recompute_phi(self):
        return mean_features_from_gradients(self.G, self.pi)


# -- seed -------------------------------------------------------------------------

def seed_context_from_estimate(est: PlugInEstimate, theta0, gap_threshold=1e-3):
    perm = best_permutation(est.M, est.pi)
    gap = permutation_gap(est.M, est.pi) if est.k > 1 else 0.0
    ctx = SeedContext(np.asarray(theta0, dtype=float), perm.sigma, gap, dict(est.diagnostics))
    if gap < gap_threshold:
        msg = f"seed gap {gap:.3g} below threshold {gap_threshold:.3g}; alignment is unreliable"
        ctx.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return ctx


def seed_alignment(samples, model, theta0=None, config: DecompositionConfig = None,
                   gap_threshold=1e-3):
    """Permutation and matching gap of the seed model's own decomposition."""
    theta0 = model.theta if theta0 is None else np.asarray(theta0, dtype=float)
    est = decompose(samples, model, config, theta0)
    return seed_context_from_estimate(est, theta0, gap_threshold)


# -- gradient moments ---------------------------------------------------------------

def mean_features_from_gradients(G, pi):
    """phi_r = sum_j pi_j sum_v G_v[j + k*r, j]."""
    pi = np.asarray(pi, dtype=float)
    k = pi.size
    S = sum(np.asarray(Gv, dtype=float) for Gv in G)
    d = S.shape[0] // k
    diag = S.reshape(d, k, k)[:, np.arange(k), np.arange(k)]   # (d, k): S[j + k*r, j]
    return diag @ pi


def gradient_moments_from_estimate(est: PlugInEstimate, k, scale_back):
    """Split a joint estimate into the class-aligned loss block and rescaled gradient block."""
    top = tuple(Mv[:k] for Mv in est.M)
    perm = best_permutation(top, est.pi)
    sig = np.asarray(perm.sigma)
    pi = est.pi[sig]
    M = tuple(Mv[:, sig] for Mv in top)
    G = tuple(scale_back * Mv[k:, sig] for Mv in est.M)
    return GradientMoments(G, pi, M, mean_features_from_gradients(G, pi), perm.sigma,
                           dict(est.diagnostics))


def _sample_subset(samples, m, rng):
    n = np.shape(samples[0])[0]
    if m is None or m >= n:
        return samples
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return [x[idx] for x in samples]


def estimate_mean_features(samples, model, theta0, theta_query=None,
                           config: DecompositionConfig = None, scale: ScaleConstants = None,
                           seed_block=None):
    """Jointly recover M_v(theta0) and G_v(theta_query) and form phi-hat.

    The gradient block is scaled by tau/B before decomposition so that both
    blocks have comparable size, then scaled back by B/tau. ``seed_block``
    optionally supplies precomputed loss vectors at theta0.
    """
    config = config or DecompositionConfig()
    theta0 = np.asarray(theta0, dtype=float)
    theta_query = theta0 if theta_query is None else np.asarray(theta_query, dtype=float)
    if model.d == 0:
        raise InputError("model has no parameters")
    scale = scale or estimate_scale_constants(samples, model, theta0)
    ratio = scale.ratio
    k = model.k
    n = np.shape(samples[0])[0]
    cs = config.chunk_size
    normalize = uses_view_normalization(model, config)

    def stream():
        for s in range(0, n, cs):
            chunk = []
            for v in range(N_VIEWS):
                x = samples[v][s:s + cs]
                if seed_block is None:
                    chunk.append(extended_loss_vectors(model, theta0, theta_query, x, v, ratio,
                                                       normalize=normalize))
                else:
                    g = model.grad_loss_vectors(x, v, theta_query)
                    chunk.append(np.concatenate(
                        [seed_block[v][s:s + cs],
                         ratio * g.transpose(0, 2, 1).reshape(g.shape[0], -1)], axis=1))
            yield tuple(chunk)

    moments = accumulate_stream(stream, dense_cap=config.dense_cap, k=k)
    try:
        est = decompose_moments(moments, k, config)
    except NumericError as exc:
        exc.args = (f"extended-feature decomposition failed: {exc.args[0] if exc.args else exc}",)
        raise
    gm = gradient_moments_from_estimate(est, k, 1.0 / ratio)
    gm.diagnostics.update({"tau": scale.tau, "B": scale.B})
    return gm


# -- constrained logistic fit ---------------------------------------------------------

def project_ball(theta, rho):
    """Euclidean projection onto {||theta|| <= rho}; returns the input object when inside."""
    norm = float(np.linalg.norm(theta))
    if norm <= rho:
        return theta
    return theta * (rho / norm)


class _LogisticObjective:
    """F(theta) = mean A(theta; x) - theta . phi for a block-feature logistic model."""

    def __init__(self, model: LinearViewModel, views, phi):
        if not isinstance(model, LinearViewModel) or model.kind != "logistic":
            raise InputError("the constrained solver needs a linear logistic model")
        self.k = model.k
        self.z = model.features.full_input(views)
        self.w = self.z.shape[1]
        self.phi = np.asarray(phi, dtype=float)
        if self.phi.shape != (model.d,):
            raise InputError(f"mean feature vector must have length {model.d}")

    def _scores(self, theta):
        return self.z @ theta.reshape(self.k, self.w).T

    def value(self, theta):
        s = self._scores(theta)
        top = s.max(axis=1)
        lse = top + np.log(np.exp(s - top[:, None]).sum(axis=1))
        return float(lse.mean() - theta @ self.phi)

    def grad(self, theta):
        p = softmax(self._scores(theta), axis=1)
        return (p.T @ self.z).reshape(-1) / self.z.shape[0] - self.phi

    def hess(self, theta):
        p = softmax(self._scores(theta), axis=1)
        n, k, w = self.z.shape[0], self.k, self.w
        H = np.empty((k, w, k, w))
        for i in range(k):
            for j in range(i, k):
                a = (p[:, i] * ((i == j) - p[:, j])) / n
                blk = self.z.T @ (a[:, None] * self.z)
                H[i, :, j, :] = blk
                H[j, :, i, :] = blk.T
        return H.reshape(k * w, k * w)


def _ball_quadratic_min(H, b, rho):
    """argmin_u b.u + u.H.u / 2 subject to ||u|| <= rho, for symmetric PSD H."""
    lam, Q = np.linalg.eigh(H)
    c = Q.T @ b
    floor = max(0.0, -lam.min())

    def u_of(mu):
        return -c / (lam + mu)

    if floor == 0.0 and lam.min() > 1e-14 * max(1.0, lam.max()):
        u = u_of(0.0)
        if np.linalg.norm(u) <= rho:
            return Q @ u
    lo = floor + 1e-300
    hi = max(1.0, floor) + np.linalg.norm(b) / rho
    while np.linalg.norm(u_of(hi)) > rho:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(u_of(mid)) > rho:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return Q @ u_of(hi)


def projected_gradient_norm(theta, grad, rho):
    """||theta - P(theta - grad)||: zero exactly at constrained stationary points."""
    return float(np.linalg.norm(theta - project_ball(theta - grad, rho)))


@dataclass
class SolveResult:
    theta: np.ndarray
    value: float
    pg_norm: float
    iterations: int
    converged: bool


def solve_constrained_logistic(model, views, phi, rho, theta_init=None, tol=1e-9, max_iter=100):
    """argmin_{||theta|| <= rho} mean A(theta; x) - theta . phi by projected Newton steps.

    Each step minimizes the local quadratic model over the ball, followed by
    an Armijo backtracking search along the (feasible) segment.
    """
    obj = _LogisticObjective(model, views, phi)
    d = model.d
    theta = np.zeros(d) if theta_init is None else project_ball(np.array(theta_init, float), rho)
    if rho == 0:
        return SolveResult(np.zeros(d), obj.value(np.zeros(d)), 0.0, 0, True)
    f = obj.value(theta)
    best = (f, theta)
    for it in range(1, max_iter + 1):
        g = obj.grad(theta)
        pg = projected_gradient_norm(theta, g, rho)
        if pg <= tol:
            return SolveResult(theta, f, pg, it - 1, True)
        H = obj.hess(theta)
        target = _ball_quadratic_min(H, g - H @ theta, rho)
        step = target - theta
        slope = float(g @ step)
        if slope >= 0:
            # quadratic model gives no descent; fall back to a projected gradient step
            step = project_ball(theta - g, rho) - theta
            slope = float(g @ step)
        t = 1.0
        while True:
            cand = theta + t * step
            fc = obj.value(cand)
            if fc <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if fc > f:
            break
        theta, f = project_ball(cand, rho), fc
        if f < best[0]:
            best = (f, theta)
    g = obj.grad(best[1])
    pg = projected_gradient_norm(best[1], g, rho)
    return SolveResult(best[1], best[0], pg, max_iter, pg <= tol)


def labeled_constrained_fit(model, views, labels, rho, tol=1e-9, max_iter=100):
    """Oracle: constrained minimizer of the labelled empirical logistic risk."""
    phi = model.mean_features(views, labels)
    return solve_constrained_logistic(model, views, phi, rho, tol=tol, max_iter=max_iter)


@dataclass
class LearnResult:
    theta: np.ndarray
    converged: bool
    seed: Optional[SeedContext] = None
    phi: Optional[np.ndarray] = None
    history: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


def learn_logistic(samples, model, theta0=None, config: LearnConfig = None,
                   decomposition: DecompositionConfig = None, phi_hat=None):
    """Estimate phi-hat once at the seed, then fit the constrained logistic objective.

    ``phi_hat`` may be supplied to skip estimation (used for oracle injection).
    """
    config = config or LearnConfig()
    theta0 = model.theta if theta0 is None else np.asarray(theta0, dtype=float)
    ctx = None
    if phi_hat is None:
        ctx = seed_alignment(samples, model, theta0, decomposition, config.gap_threshold)
        gm = estimate_mean_features(samples, model, theta0, theta0, decomposition)
        phi_hat = gm.phi
    sol = solve_constrained_logistic(model, samples, phi_hat, config.rho, theta0,
                                     config.tol, config.max_iter)
    if not sol.converged:
        log.warning("constrained solver stopped at projected-gradient norm %.3g", sol.pg_norm)
    return LearnResult(sol.theta, sol.converged, ctx, np.asarray(phi_hat),
                       info={"pg_norm": sol.pg_norm, "iterations": sol.iterations,
                             "objective": sol.value})


# -- general loop -----------------------------------------------------------------------

def unsupervised_gradient(samples, model, theta0, theta, decomposition=None, scale=None,
                          seed_block=None):
    """Estimated risk gradient at theta: mean dA/dtheta minus phi-hat(theta)."""
    gm = estimate_mean_features(samples, model, theta0, theta, decomposition, scale, seed_block)
    grad_A = np.mean(model.grad_base_term(samples, theta), axis=0)
    return grad_A - gm.phi, gm


def dual_averaging(theta0, gradient_fn: Callable, eta, steps, rho=None, log_fh=None,
                   risk_fn: Callable = None):
    """theta_t = P(theta0 + eta * z_t), z_{t+1} = z_t - g_t; returns the iterate average.

    ``gradient_fn(theta, t)`` may raise ``MvRiskError``; the step is then
    recorded as skipped and the previous gradient is reused.
    """
    theta0 = np.asarray(theta0, dtype=float)
    z = np.zeros_like(theta0)
    avg = theta0.copy()
    prev = np.zeros_like(theta0)
    history = []
    for t in range(1, steps + 1):
        theta = theta0 + eta * z if np.any(z) else theta0
        if rho is not None:
            theta = project_ball(theta, rho)
        skipped = False
        try:
            g = np.asarray(gradient_fn(theta, t), dtype=float)
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient estimate", index=t)
        except MvRiskError as exc:
            log.warning("step %d skipped: %s", t, exc)
            g, skipped = prev, True
        prev = g
        z = z - g
        avg = avg + (theta - avg) / t
        entry = {"t": t, "gradient_norm": float(np.linalg.norm(g)), "skipped": skipped,
                 "risk": None if risk_fn is None else float(risk_fn(theta))}
        history.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry) + "\n")
    return avg, history


def _quasi_linear_risk(model, samples, last_phi):
    """Logistic risk estimate mean A(theta) - theta . phi-hat using the latest phi-hat."""
    def risk(theta):
        if "phi" not in last_phi:
            return float("nan")
        return _LogisticObjective(model, samples, last_phi["phi"]).value(theta)
    return risk


def learn_general(samples, model, theta0=None, config: LearnConfig = None,
                  decomposition: DecompositionConfig = None, gradient_fn: Callable = None,
                  log_fh=None):
    """Dual averaging driven by unsupervised gradient estimates (or an injected gradient)."""
    config = config or LearnConfig()
    theta0 = model.theta if theta0 is None else np.asarray(theta0, dtype=float)
    rng = np.random.default_rng(config.seed)
    ctx = None
    risk_fn = None
    if gradient_fn is None:
        ctx = seed_alignment(samples, model, theta0, decomposition, config.gap_threshold)
        scale = estimate_scale_constants(samples, model, theta0)
        cache = None
        if config.cache_seed_block:
            normalize = uses_view_normalization(model, decomposition)
            cache = [model.loss_vectors(samples[v], v, theta0) for v in range(N_VIEWS)]
            if normalize:
                cache = [normalize_views(h)[0] for h in cache]
        last_phi = {}

        def gradient_fn(theta, t):
            if cache is not None or config.m is None:
                sub, block = samples, cache
            else:
                sub, block = _sample_subset(samples, config.m, rng), None
            g, gm = unsupervised_gradient(sub, model, theta0, theta, decomposition, scale, block)
            last_phi["phi"] = gm.phi
            return g

        if isinstance(model, LinearViewModel) and model.kind == "logistic":
            risk_fn = _quasi_linear_risk(model, samples, last_phi)
    theta_bar, history = dual_averaging(theta0, gradient_fn, config.eta, config.steps,
                                        config.rho, log_fh, risk_fn)
    return LearnResult(theta_bar, not any(h["skipped"] for h in history), ctx, None, history)


def learn(samples, model, theta0=None, config: LearnConfig = None,
          decomposition: DecompositionConfig = None, log_fh=None):
    config = config or LearnConfig()
    if config.method == "logistic":
        if config.steps == 0:
            theta0 = model.theta if theta0 is None else np.asarray(theta0, dtype=float)
            return LearnResult(theta0.copy(), True)
        return learn_logistic(samples, model, theta0, config, decomposition)
    return learn_general(samples, model, theta0, config, decomposition, log_fh=log_fh)
