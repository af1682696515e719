"""Class-permutation resolution by maximum-weight bipartite matching.

Convention: ``sigma[j]`` is the recovered column assigned to class (row) j, and
the matching objective is ``sum_j X[sigma[j], j]`` with
``X[i, j] = pi[i] * sum_v M_v[j, i]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError


@dataclass(frozen=True)
class Permutation:
    sigma: tuple
    value: float

    def __post_init__(self):
        if sorted(self.sigma) != list(range(len(self.sigma))):
            raise InputError(f"not a permutation: {self.sigma}")

    @property
    def array(self):
        return np.asarray(self.sigma, dtype=int)

    def inverse(self):
        inv = np.empty(len(self.sigma), dtype=int)
        inv[self.array] = np.arange(len(self.sigma))
        return tuple(int(i) for i in inv)


def _square(X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != X.shape[1] or X.shape[0] == 0:
        raise InputError(f"need a non-empty square matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite matching weights")
    return X


def hungarian(cost):
    """Minimum-cost perfect assignment on a square matrix.

    Returns ``(row_of_col, u, v)`` where ``row_of_col[j]`` is the row matched to
    column j and (u, v) are optimal dual potentials: ``cost - u[:, None] - v``
    is non-negative and zero on the matching. O(n^3).
    """
    a = _square(cost)
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)     # p[j]: row (1-based) matched to column j; 0 = free
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return p[1:] - 1, u[1:], v[1:]


def _augment(eq, row_of, col_of, fixed_rows, fixed_cols, start_col, target_row):
    """Alternating path in the equality graph from a free column to a free row."""
    n = eq.shape[0]
    prev = {start_col: None}
    stack = [start_col]
    while stack:
        c = stack.pop()
        for r in range(n):
            if not eq[r, c] or fixed_rows[r]:
                continue
            if r == target_row:
                # flip the path
                while c is not None:
                    r_prev = row_of[c]
                    row_of[c] = r
                    col_of[r] = c
                    r = r_prev
                    c = prev[c]
                return True
            nc = col_of[r]
            if nc < 0 or fixed_cols[nc] or nc in prev:
                continue
            prev[nc] = c
            stack.append(nc)
    return False


def max_weight_matching(X, tol=None):
    """sigma maximizing sum_j X[sigma[j], j]; ties go to the lexicographically smallest sigma."""
    X = _square(X)
    n = X.shape[0]
    cost = X.max() - X
    row_of, u, v = hungarian(cost)
    if tol is None:
        tol = 1e-11 * n * (1.0 + float(np.abs(X).max()))
    eq = (cost - u[:, None] - v[None, :]) <= tol
    row_of = row_of.copy()
    col_of = np.empty(n, dtype=int)
    col_of[row_of] = np.arange(n)
    fixed_rows = np.zeros(n, dtype=bool)
    fixed_cols = np.zeros(n, dtype=bool)
    for j in range(n):
        for i in range(n):
            if fixed_rows[i] or not eq[i, j]:
                continue
            if row_of[j] == i:
                break
            saved = (row_of.copy(), col_of.copy())
            i0, j1 = row_of[j], col_of[i]
            row_of[j], col_of[i] = i, j
            row_of[j1], col_of[i0] = -1, -1
            fixed_rows[i], fixed_cols[j] = True, True
            if _augment(eq, row_of, col_of, fixed_rows, fixed_cols, j1, i0):
                fixed_rows[i], fixed_cols[j] = False, False
                break
            fixed_rows[i], fixed_cols[j] = False, False
            row_of, col_of = saved
        fixed_rows[row_of[j]] = True
        fixed_cols[j] = True
    sigma = tuple(int(r) for r in row_of)
    return Permutation(sigma, permutation_value(X, sigma))


def permutation_value(X, sigma):
    """sum_j X[sigma[j], j], summed in column order."""
    total = 0.0
    for j, i in enumerate(sigma):
        total += float(X[i, j])
    return total


def assignment_weights(M, pi):
    """X[i, j] = pi[i] * sum_v M_v[j, i] over the top k rows of each M_v."""
    pi = np.asarray(pi, dtype=float)
    k = pi.shape[0]
    M = [np.asarray(Mv, dtype=float) for Mv in M]
    if any(Mv.ndim != 2 or Mv.shape[0] < k or Mv.shape[1] != k for Mv in M):
        raise InputError(f"each M_v must have >= {k} rows and exactly {k} columns")
    S = sum(Mv[:k, :] for Mv in M)
    X = pi[:, None] * S.T
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite entries in M or pi")
    return X


def best_permutation(M, pi):
    """Alignment of recovered columns to classes that minimizes the plug-in risk."""
    return max_weight_matching(assignment_weights(M, pi))


def second_best_value(X):
    """Largest objective over permutations other than the optimum.

    The runner-up must drop at least one edge of the optimal matching, so it is
    the best matching with some single optimal edge forbidden.
    """
    X = _square(X)
    n = X.shape[0]
    if n < 2:
        raise InputError("no second permutation exists for k < 2")
    best = max_weight_matching(X)
    penalty = X.min() - (n + 1) * (X.max() - X.min() + 1.0)
    runner = -np.inf
    for j, i in enumerate(best.sigma):
        Y = X.copy()
        Y[i, j] = penalty
        alt = max_weight_matching(Y)
        runner = max(runner, permutation_value(X, alt.sigma))
    return runner


def weights_gap(X):
    X = _square(X)
    return max(0.0, max_weight_matching(X).value - second_best_value(X))


def permutation_gap(M, pi):
    """Best minus second-best matching objective (>= 0)."""
    return weights_gap(assignment_weights(M, pi))


def column_alignment(ref, est):
    """perm such that est_v[:, perm[j]] best matches ref_v[:, j] in summed squared error."""
    ref = [np.atleast_2d(np.asarray(r, dtype=float)) for r in ref]
    est = [np.atleast_2d(np.asarray(e, dtype=float)) for e in est]
    k = ref[0].shape[1]
    cost = np.zeros((k, k))
    for r, e in zip(ref, est):
        cost += ((r[:, :, None] - e[:, None, :]) ** 2).sum(axis=0)
    row_of, _, _ = hungarian(cost)
    perm = np.empty(k, dtype=int)
    perm[row_of] = np.arange(k)
    return perm
