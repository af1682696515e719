"""Chain models: log-space forward-backward and per-position unlabelled risk.

Positions are 0-based throughout. For a chain of length T the unary local
losses are defined at 1 <= t <= T-2 and the pair losses (labels y[t-1], y[t])
at 2 <= t <= T-2, so the estimable inner risk covers y[1:T-1].
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .decomposition import DecompositionConfig, decompose_arrays
from .errors import InputError, NumericError
from .matching import best_permutation
from .moments import normalize_views
from .risk import RiskEstimate, class_contributions


def _log_normalize(a, axis=-1):
    return a - logsumexp(a, axis=axis, keepdims=True)


def _safe_log(p, what):
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise NumericError(f"{what} must be strictly positive and finite", stage="potentials")
    return np.log(p)


class HmmModel:
    """Chain CRF with positive transition potentials f(i, j) and emission potentials g(j, x)."""

    def __init__(self, k, log_trans, log_init=None, emission="discrete", log_probs=None,
                 means=None, sd=None):
        self.k = int(k)
        self.log_trans = np.asarray(log_trans, dtype=float)
        self.log_init = (np.zeros(self.k) if log_init is None
                         else np.asarray(log_init, dtype=float))
        if self.log_trans.shape != (self.k, self.k) or self.log_init.shape != (self.k,):
            raise InputError("transition must be k x k and initial length k")
        if not (np.all(np.isfinite(self.log_trans)) and np.all(np.isfinite(self.log_init))):
            raise NumericError("zero or non-finite potential", stage="potentials")
        self.emission = emission
        if emission == "discrete":
            self.log_probs = np.asarray(log_probs, dtype=float)
            if self.log_probs.ndim != 2 or self.log_probs.shape[0] != self.k:
                raise InputError("discrete emission table must be k x alphabet")
            if not np.all(np.isfinite(self.log_probs)):
                raise NumericError("zero emission potential", stage="potentials")
        elif emission == "gaussian":
            self.means = np.atleast_2d(np.asarray(means, dtype=float))
            if self.means.shape[0] != self.k:
                self.means = self.means.T
            self.sd = np.broadcast_to(np.asarray(1.0 if sd is None else sd, dtype=float),
                                      self.means.shape).copy()
            if np.any(self.sd <= 0):
                raise InputError("emission sd must be positive")
        else:
            raise InputError(f"unknown emission type {emission!r}")

    @classmethod
    def from_config(cls, config):
        """Same schema as the sequence generator: {k, transition, initial, emission}."""
        k = int(config["k"])
        log_trans = _safe_log(config["transition"], "transition")
        log_init = _safe_log(config.get("initial", np.full(k, 1.0 / k)), "initial")
        em = config["emission"]
        if em["type"] == "discrete":
            return cls(k, log_trans, log_init, "discrete", log_probs=_safe_log(em["probs"], "emission"))
        return cls(k, log_trans, log_init, "gaussian", means=em["means"], sd=em.get("sd", 1.0))

    def to_dict(self):
        doc = {"k": self.k, "transition": np.exp(self.log_trans).tolist(),
               "initial": np.exp(self.log_init).tolist()}
        if self.emission == "discrete":
            doc["emission"] = {"type": "discrete", "probs": np.exp(self.log_probs).tolist()}
        else:
            doc["emission"] = {"type": "gaussian", "means": self.means.tolist(),
                               "sd": self.sd.tolist()}
        return doc

    def log_emission(self, obs):
        """log g(j, x_t) for a batch of sequences: (m, T) or (m, T, p) -> (m, T, k)."""
        obs = np.asarray(obs)
        if self.emission == "discrete":
            obs = obs.astype(int)
            if obs.min(initial=0) < 0 or obs.max(initial=0) >= self.log_probs.shape[1]:
                raise InputError("observation outside the emission alphabet")
            return np.moveaxis(self.log_probs[:, obs], 0, -1)
        x = obs.astype(float)
        if x.ndim == 2:
            x = x[..., None]
        z = (x[..., None, :] - self.means) / self.sd
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(self.sd), axis=-1) \
            - 0.5 * self.means.shape[1] * np.log(2 * np.pi)


@dataclass
class MessageTable:
    log_alpha: np.ndarray      # (m, T, k)  log p(y_t | x_{1..t})
    log_pred: np.ndarray       # (m, T, k)  log p(y_t | x before t)
    log_beta: np.ndarray       # (m, T, k)  backward messages, max entry 0 per step
    log_unary: np.ndarray      # (m, T, k)  log posterior of y_t
    log_pair: np.ndarray       # (m, T-1, k, k); entry t-1 holds log p(y_{t-1}, y_t | x)
    log_emit: np.ndarray       # (m, T, k)

    @property
    def unary(self):
        return np.exp(self.log_unary)

    @property
    def pair(self):
        return np.exp(self.log_pair)


def _batch(obs):
    """Promote a single 1-D sequence to a batch of one."""
    obs = np.asarray(obs)
    return obs[None] if obs.ndim == 1 else obs


def forward_backward(hmm: HmmModel, obs):
    """Exact posteriors for a batch of sequences (a single 1-D sequence is promoted)."""
    obs = _batch(obs)
    le = hmm.log_emission(obs)
    m, T, k = le.shape
    if T < 1:
        raise InputError("sequences must have length >= 1")
    la = np.empty((m, T, k))
    lp = np.empty((m, T, k))
    lb = np.zeros((m, T, k))
    lp[:, 0] = _log_normalize(hmm.log_init)
    la[:, 0] = _log_normalize(lp[:, 0] + le[:, 0])
    for t in range(1, T):
        lp[:, t] = _log_normalize(logsumexp(la[:, t - 1, :, None] + hmm.log_trans, axis=1))
        la[:, t] = _log_normalize(lp[:, t] + le[:, t])
    for t in range(T - 2, -1, -1):
        b = logsumexp(hmm.log_trans + (le[:, t + 1] + lb[:, t + 1])[:, None, :], axis=2)
        lb[:, t] = b - b.max(axis=1, keepdims=True)
    lu = _log_normalize(la + lb)
    pair = (la[:, :-1, :, None] + hmm.log_trans + (le[:, 1:] + lb[:, 1:])[:, :, None, :])
    if T > 1:
        pair = pair - logsumexp(pair, axis=(2, 3), keepdims=True)
    if not np.all(np.isfinite(lu)):
        raise NumericError("non-finite posterior", stage="forward_backward")
    return MessageTable(la, lp, lb, lu, pair, le)


def local_loss_views(hmm: HmmModel, obs, t, kind="unary", messages: MessageTable = None):
    """Three per-view loss vectors and the base term for the local loss at position t.

    Unary labels are j; pair labels (i, j) are flattened as i * k + j. In both
    cases A - (f0 + f1 + f2) at a label equals minus the log posterior of it.
    """
    obs = _batch(obs)
    T = obs.shape[1]
    if kind == "unary":
        if not 1 <= t <= T - 2:
            raise InputError(f"unary position {t} outside 1..{T - 2}")
    elif kind == "pair":
        if not 2 <= t <= T - 2:
            raise InputError(f"pair position {t} outside 2..{T - 2}")
    else:
        raise InputError(f"unknown local loss kind {kind!r}")
    mt = messages or forward_backward(hmm, obs)
    if kind == "unary":
        H = [mt.log_pred[:, t], mt.log_emit[:, t], mt.log_beta[:, t]]
    else:
        k = hmm.k
        m = obs.shape[0]
        f0 = np.repeat(mt.log_pred[:, t - 1], k, axis=1)
        f1 = (mt.log_emit[:, t - 1, :, None] + hmm.log_trans + mt.log_emit[:, t, None, :])
        f2 = np.tile(mt.log_beta[:, t], (1, k))
        H = [f0, f1.reshape(m, k * k), f2]
    A = logsumexp(H[0] + H[1] + H[2], axis=1)
    return H, A


def _label_free(H):
    return all(np.all(h == h[:, :1]) for h in H)


@dataclass
class HmmRiskEstimate:
    value: float
    T: int
    unary: dict = field(default_factory=dict)           # t -> RiskEstimate of the unary loss
    pair: dict = field(default_factory=dict)            # t -> estimated mean pair loss
    transitions: dict = field(default_factory=dict)     # t -> estimated joint of (y_{t-1}, y_t)

    def rows(self):
        """Per-position rows: (kind, t, value, lambda_min, pi_min)."""
        out = []
        for t in sorted(self.pair):
            out.append(("pair", t, self.pair[t], np.nan, float(self.transitions[t].min())))
        for t in self.separator_positions():
            est = self.unary[t]
            lam = est.diagnostics.get("lambda")
            pm = est.diagnostics.get("pi_min", np.nan)
            out.append(("unary", t, est.value,
                        float(np.min(lam)) if lam is not None else np.nan, float(pm)))
        return out

    def separator_positions(self):
        return list(range(2, self.T - 2))

    def to_dict(self):
        return {"value": self.value, "T": self.T,
                "pair": {str(t): v for t, v in self.pair.items()},
                "unary": {str(t): e.to_dict() for t, e in self.unary.items()},
                "transitions": {str(t): p.tolist() for t, p in self.transitions.items()}}


def _aligned_means(est: RiskEstimate, v):
    """Per-class expected view-v term sum_j pi[sigma[j]] M_v[j, sigma[j]] split by class."""
    if est.estimate is None:
        return est.diagnostics["label_free_means"][v]
    M, pi, sigma = est.estimate.M, est.estimate.pi, np.asarray(est.sigma)
    return float(np.sum(pi[sigma] * M[v][np.arange(len(sigma)), sigma]))


def unary_position_risk(hmm, obs, t, config=None, messages=None, normalize=True):
    """Plug-in estimate of the mean unary local loss at position t.

    With ``normalize`` each view block is shifted by its per-sample
    log-sum-exp and the base term absorbs the shifts, which leaves the loss
    unchanged but bounds every view term. Returns the estimate, the view
    blocks used, and the per-view shifts.
    """
    H, A = local_loss_views(hmm, obs, t, "unary", messages)
    shifts = [np.zeros(A.shape[0]) for _ in H]
    if normalize:
        pairs = [normalize_views(h) for h in H]
        H, shifts = [h for h, _ in pairs], [c for _, c in pairs]
    A_mean = float(np.mean(A - sum(shifts)))
    if _label_free(H):
        means = [float(np.mean(h[:, 0])) for h in H]
        return RiskEstimate(A_mean - sum(means), tuple(range(hmm.k)), A_mean, np.array(means),
                            None, {"label_free": True, "label_free_means": means}), H, shifts
    try:
        est = decompose_arrays(H, hmm.k, config)
    except NumericError as exc:
        exc.index = t
        exc.args = (f"position {t}: {exc.args[0] if exc.args else exc}",)
        raise
    perm = best_permutation(est.M, est.pi)
    contrib = class_contributions(est.M, est.pi, perm.sigma)
    return RiskEstimate(A_mean - float(contrib.sum()), perm.sigma, A_mean, contrib, est,
                        dict(est.diagnostics)), H, shifts


def transition_marginal(h_prev, h_next, M_prev, M_next):
    """Joint law of adjacent labels from the cross moment of the emission views.

    Emissions at t-1 and t are independent given both labels, so
    E[h_prev h_next^T] = M_prev P M_next^T with class-aligned M's.
    """
    C = h_prev.T @ h_next / h_prev.shape[0]
    P = np.linalg.solve(M_prev, np.linalg.solve(M_next, C.T).T)
    P = np.clip(P, 0.0, None)
    s = P.sum()
    if not s > 0:
        raise NumericError("transition marginal has no positive mass", stage="transitions")
    return P / s


def _aligned_matrix(est: RiskEstimate, v):
    M = est.estimate.M[v]
    return M[:, np.asarray(est.sigma)]


def hmm_risk(hmm: HmmModel, obs, config: DecompositionConfig = None, jobs=1, normalize=True):
    """Unlabelled estimate of -E[log p(y[1:T-1] | x)] from per-position decompositions.

    Each unary position is decomposed independently. Pair terms reuse the two
    adjacent unary decompositions for their view terms and the transition
    marginal for the potential term, because the pair loss vectors only
    span a rank-k subspace of the k^2 pair labels.
    """
    obs = _batch(obs)
    T = obs.shape[1]
    if T < 4:
        raise InputError(f"sequence length {T} < 4 leaves no admissible pair position")
    config = config or DecompositionConfig()
    if obs.shape[0] < config.min_samples:
        raise InputError(f"need at least {config.min_samples} sequences")
    mt = forward_backward(hmm, obs)
    positions = list(range(1, T - 1))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(
                lambda t: unary_position_risk(hmm, obs, t, config, mt, normalize), positions))
    else:
        results = [unary_position_risk(hmm, obs, t, config, mt, normalize) for t in positions]
    unary = {t: r[0] for t, r in zip(positions, results)}
    views = {t: r[1] for t, r in zip(positions, results)}
    shifts = {t: r[2] for t, r in zip(positions, results)}
    out = HmmRiskEstimate(0.0, T, unary)
    trans_const = np.all(hmm.log_trans == hmm.log_trans[0, 0])
    for t in range(2, T - 1):
        _, A = local_loss_views(hmm, obs, t, "pair", mt)
        # the pair view terms are sums of the unary ones, so the same shifts apply
        A = A - shifts[t - 1][0] - shifts[t - 1][1] - shifts[t][1] - shifts[t][2]
        prev, cur = unary[t - 1], unary[t]
        view_terms = (_aligned_means(prev, 0) + _aligned_means(prev, 1)
                      + _aligned_means(cur, 1) + _aligned_means(cur, 2))
        if trans_const:
            P = np.full((hmm.k, hmm.k), 1.0 / hmm.k ** 2)
        else:
            if prev.estimate is None or cur.estimate is None:
                raise NumericError(f"position {t}: emission views carry no label information",
                                   stage="transitions", index=t)
            P = transition_marginal(views[t - 1][1], views[t][1],
                                    _aligned_matrix(prev, 1), _aligned_matrix(cur, 1))
        out.transitions[t] = P
        out.pair[t] = float(np.mean(A)) - view_terms - float(np.sum(P * hmm.log_trans))
    out.value = (sum(out.pair.values())
                 - sum(unary[t].value for t in out.separator_positions()))
    return out


# -- labelled references --------------------------------------------------------

def labeled_position_losses(hmm, obs, labels, messages=None):
    """Per-sequence pair losses (m, T-1) and unary losses (m, T) with labels revealed."""
    obs = _batch(obs)
    labels = np.atleast_2d(np.asarray(labels, dtype=int))
    mt = messages or forward_backward(hmm, obs)
    m, T = labels.shape
    rows = np.arange(m)[:, None]
    unary = -mt.log_unary[rows, np.arange(T)[None, :], labels]
    pair = -mt.log_pair[rows, np.arange(T - 1)[None, :], labels[:, :-1], labels[:, 1:]]
    return pair, unary


def labeled_inner_risk(hmm, obs, labels):
    """Mean of -log p(y[1:T-1] | x) over labelled sequences."""
    pair, unary = labeled_position_losses(hmm, obs, labels)
    T = unary.shape[1]
    # pair entry t-1 holds the loss for (y[t-1], y[t])
    inner = pair[:, 1:T - 2].sum(axis=1) - unary[:, 2:T - 2].sum(axis=1)
    return float(np.mean(inner))


def sequence_log_posterior(hmm, obs, labels):
    """log p(y | x) for each labelled sequence, via the chain junction-tree identity."""
    pair, unary = labeled_position_losses(hmm, obs, labels)
    if unary.shape[1] == 1:
        return -unary[:, 0]
    return -(pair.sum(axis=1) - unary[:, 1:-1].sum(axis=1))
