"""Assemble risk estimates from recovered (M, pi) and a class alignment."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .decomposition import (DecompositionConfig, PlugInEstimate, _jsonable, decompose,
                            decompose_arrays, uses_view_normalization)
from .errors import InputError
from .matching import Permutation, best_permutation, max_weight_matching, permutation_gap
from .models import N_VIEWS
from .moments import normalize_views


@dataclass
class RiskEstimate:
    value: float
    sigma: tuple
    A_mean: float
    contributions: np.ndarray
    estimate: Optional[PlugInEstimate] = None
    diagnostics: dict = field(default_factory=dict)
    gap: Optional[float] = None
    baselines: dict = field(default_factory=dict)

    def recompute(self):
        """Rebuild the value from the stored estimate and permutation."""
        if self.estimate is None:
            return self.A_mean - float(np.sum(self.contributions))
        return risk_from_components(self.A_mean, self.estimate.M, self.estimate.pi, self.sigma)

    def to_dict(self):
        return {
            "value": self.value,
            "sigma": list(self.sigma),
            "A_mean": self.A_mean,
            "contributions": np.asarray(self.contributions).tolist(),
            "diagnostics": _jsonable(self.diagnostics),
            "gap": self.gap,
            "baselines": _jsonable(self.baselines),
        }


def class_contributions(M, pi, sigma):
    """pi[sigma[j]] * sum_v M_v[j, sigma[j]] for every class j."""
    sigma = np.asarray(sigma, dtype=int)
    pi = np.asarray(pi, dtype=float)
    k = pi.size
    if sorted(sigma.tolist()) != list(range(k)):
        raise InputError(f"sigma is not a permutation of 0..{k - 1}")
    if any(np.shape(Mv)[0] < k or np.shape(Mv)[1] != k for Mv in M):
        raise InputError("each M_v must be (>= k) x k")
    rows = np.arange(k)
    return np.array([pi[sigma[j]] for j in rows]) * sum(
        np.asarray(Mv)[rows, sigma] for Mv in M)


def risk_from_components(A_mean, M, pi, sigma):
    """A_mean - sum_j pi[sigma[j]] sum_v M_v[j, sigma[j]]."""
    return float(A_mean - np.sum(class_contributions(M, pi, sigma)))


def mean_base_term(samples, model, theta=None, chunk_size=8192):
    n = np.shape(samples[0])[0]
    total = 0.0
    for s in range(0, n, chunk_size):
        total += float(np.sum(model.base_term([x[s:s + chunk_size] for x in samples], theta)))
    return total / n


def _label_free(H):
    """True when every loss vector is constant across classes (risk needs no labels)."""
    return all(np.all(h == h[:, :1]) for h in H)


def predictive_entropy(samples, model, theta=None):
    """Mean entropy of p_theta(. | x) over unlabelled samples."""
    logp = model.class_log_probs(samples, theta)
    return float(np.mean(-np.sum(np.exp(logp) * logp, axis=1)))


def labeled_risk(views, labels, model, theta=None):
    """Mean loss with labels revealed (oracle / validation baseline)."""
    return float(np.mean(model.loss(views, labels, theta)))


def estimate_risk(samples, model, config: DecompositionConfig = None, *, compute_gap=False,
                  validation=None, theta=None):
    """Unlabelled plug-in risk: decompose, align classes, assemble.

    ``validation`` is an optional labelled ``(views, labels)`` pair from the
    training distribution; its mean loss is reported as a baseline.
    """
    config = config or DecompositionConfig()
    A_mean = mean_base_term(samples, model, theta)
    baselines = {}
    if validation is not None:
        baselines["validation"] = labeled_risk(validation[0], validation[1], model, theta)
    if model.kind in ("logistic", "additive-scorer"):
        baselines["entropy"] = predictive_entropy(samples, model, theta)
    H = model.all_loss_vectors(samples, theta)
    if uses_view_normalization(model, config):
        # shifts move from the per-view terms into the base term; the loss is unchanged
        shifted = [normalize_views(h) for h in H]
        H = [h for h, _ in shifted]
        A_mean -= sum(float(np.mean(c)) for _, c in shifted)
    if _label_free(H):
        contrib = np.array([float(np.mean(h[:, 0])) for h in H])
        return RiskEstimate(A_mean - float(contrib.sum()), tuple(range(model.k)), A_mean,
                            contrib, None, {"label_free": True}, None, baselines)
    est = decompose(samples, model, config, theta)
    perm = best_permutation(est.M, est.pi)
    value = risk_from_components(A_mean, est.M, est.pi, perm.sigma)
    gap = permutation_gap(est.M, est.pi) if compute_gap else None
    return RiskEstimate(value, perm.sigma, A_mean,
                        class_contributions(est.M, est.pi, perm.sigma), est,
                        dict(est.diagnostics), gap, baselines)


# -- exponential loss -----------------------------------------------------------

def exponential_weights(M, pi):
    """X[i, j] = pi[i] * prod_v M_v[j, i]."""
    pi = np.asarray(pi, dtype=float)
    k = pi.size
    prod = np.ones((k, k))
    for Mv in M:
        prod = prod * np.asarray(Mv, dtype=float)[:k, :]
    return pi[:, None] * prod.T


def exponential_permutation(M, pi):
    """Alignment minimizing the product-form risk."""
    X = exponential_weights(M, pi)
    perm = max_weight_matching(-X)
    return Permutation(perm.sigma, -perm.value)


def exponential_risk(M, pi, sigma):
    """sum_j pi[sigma[j]] prod_v M_v[j, sigma[j]] where M_v holds conditional means of exp(-score)."""
    if any(np.any(np.asarray(Mv) < 0) for Mv in M):
        warnings.warn("negative conditional means for a positive loss: model violation",
                      RuntimeWarning, stacklevel=2)
    sigma = np.asarray(sigma, dtype=int)
    pi = np.asarray(pi, dtype=float)
    rows = np.arange(pi.size)
    prod = np.ones(pi.size)
    for Mv in M:
        prod = prod * np.asarray(Mv)[rows, sigma]
    return float(np.sum(pi[sigma] * prod))


def estimate_exponential_risk(samples, model, config: DecompositionConfig = None, theta=None):
    if model.kind != "exponential":
        raise InputError("exponential risk needs an exponential-kind model")
    est = decompose(samples, model, config, theta)
    perm = exponential_permutation(est.M, est.pi)
    value = exponential_risk(est.M, est.pi, perm.sigma)
    return RiskEstimate(value, perm.sigma, 0.0, np.array([value]), est, dict(est.diagnostics))


# -- mediating variable ---------------------------------------------------------

def mediator_alignment(M, p, r):
    """Assign recovered columns to mediator values.

    Column c gets mediator s maximizing total p[c] * sum_v M_v[r[s], c], so that
    every label keeps its number of mediator values. Returns ``columns`` with
    ``columns[s]`` the recovered column for mediator s.
    """
    r = np.asarray(r, dtype=int)
    k = int(r.max()) + 1
    S = sum(np.asarray(Mv, dtype=float)[:k, :] for Mv in M)
    X = np.asarray(p)[None, :] * S[r, :]        # X[s, c]
    perm = max_weight_matching(X)                # perm.sigma[c] = s
    columns = np.empty(r.size, dtype=int)
    columns[np.asarray(perm.sigma)] = np.arange(r.size)
    return columns


def mediated_risk(M, p, r, A_mean=0.0, columns=None, convention="loss"):
    """Risk with views independent given a mediator z that refines the label.

    ``M`` are the extended matrices (rows: the k loss functions first, then the
    extension functions; columns: recovered mediator components), ``p`` the
    recovered mediator prior in the same column order, ``r[s]`` the label of
    mediator s. The correction term is subtracted under the ``loss`` convention
    (consistent with L = A - sum_v f_v); ``published`` adds it instead.
    """
    r = np.asarray(r, dtype=int)
    kz = r.size
    k = int(r.max()) + 1
    if sorted(set(r.tolist())) != list(range(k)):
        raise InputError("mediator-to-label map must be onto 0..k-1")
    if kz < k:
        raise InputError("need at least as many mediator values as labels")
    M = [np.asarray(Mv, dtype=float) for Mv in M]
    if any(Mv.shape[1] != kz or Mv.shape[0] < k for Mv in M):
        raise InputError(f"extended matrices must have >= {k} rows and {kz} columns")
    p = np.asarray(p, dtype=float)
    if columns is None:
        columns = mediator_alignment(M, p, r)
    columns = np.asarray(columns, dtype=int)
    corr = sum(float(p[columns[s]] * sum(Mv[r[s], columns[s]] for Mv in M)) for s in range(kz))
    if convention == "loss":
        return float(A_mean - corr)
    if convention == "published":
        return float(A_mean + corr)
    raise InputError(f"unknown sign convention {convention!r}")


def estimate_mediated_risk(samples, model, extensions, r, config: DecompositionConfig = None,
                           convention="loss"):
    """Decompose extended loss vectors h'_v = [h_v, extensions[v](x_v)] with k' components."""
    r = np.asarray(r, dtype=int)
    A_mean = mean_base_term(samples, model)
    normalize = uses_view_normalization(model, config)
    H = []
    for v in range(N_VIEWS):
        h = model.loss_vectors(samples[v], v)
        if normalize:
            h, shift = normalize_views(h)
            A_mean -= float(np.mean(shift))
        extra = np.asarray(extensions[v](samples[v]), dtype=float)
        H.append(np.concatenate([h, extra], axis=1))
    if any(h.shape[1] < r.size for h in H):
        raise InputError(f"extended loss vectors need at least k'={r.size} entries")
    est = decompose_arrays(H, r.size, config)
    columns = mediator_alignment(est.M, est.pi, r)
    value = mediated_risk(est.M, est.pi, r, A_mean, columns, convention)
    return RiskEstimate(value, tuple(int(c) for c in columns), A_mean,
                        np.array([A_mean - value]), est, dict(est.diagnostics))
