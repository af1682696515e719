import numpy as np
import pytest

from mvrisk.models import build_builtin_model


def random_truth(rng, k, rows=None, sigma_min=0.3, pi_min=0.15):
    """Random (M_0, M_1, M_2, pi) with sigma_k(M_v) >= sigma_min and min(pi) >= pi_min."""
    rows = rows or (k, k, k)
    while True:
        M = [rng.normal(size=(r, k)) + 2.0 * np.eye(r, k) for r in rows]
        pi = rng.dirichlet(np.full(k, 3.0))
        if pi.min() >= pi_min and all(np.linalg.svd(Mv, compute_uv=False)[k - 1] >= sigma_min
                                      for Mv in M):
            return M, pi


def aligned_error(M_true, pi_true, M_est, pi_est):
    """Max abs error after the one column permutation that best aligns everything."""
    import itertools
    k = pi_true.size
    best = np.inf
    for perm in itertools.permutations(range(k)):
        p = list(perm)
        err = max(max(np.abs(Mt - Me[:, p]).max() for Mt, Me in zip(M_true, M_est)),
                  np.abs(pi_true - pi_est[p]).max())
        best = min(best, err)
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_logistic():
    rng = np.random.default_rng(7)
    dims = (2, 3, 2)
    k = 3
    theta = rng.normal(size=k * sum(dims))
    return build_builtin_model("logistic", k, dims, theta)


LOGISTIC_CONFIG = {"k": 3, "view_dims": [10, 10, 10], "structure_seed": 3,
                   "mean_scale": 0.5, "noise": 1.0}


@pytest.fixture(scope="session")
def trained_logistic():
    """k=3 logistic model fitted on labelled generator data, plus the generator."""
    from mvrisk.data import MultiViewGenerator
    from mvrisk.learning import labeled_constrained_fit
    gen = MultiViewGenerator.from_config(LOGISTIC_CONFIG)
    train = gen.sample(5000, 1)
    blank = build_builtin_model("logistic", 3, (10, 10, 10))
    sol = labeled_constrained_fit(blank, train.views, train.labels, 10.0)
    return blank.with_theta(sol.theta), LOGISTIC_CONFIG, gen


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
