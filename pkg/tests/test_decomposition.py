import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvrisk.decomposition import (DecompositionConfig, PlugInEstimate, Whitening, amplify,
                                  decompose, decompose_arrays, decompose_moments,
                                  moment_residual, project_to_simplex, recover_parameters,
                                  refine, symmetrize_and_whiten, tensor_power_method)
from mvrisk.errors import AmplificationError, IllConditionedError, InputError, NumericError
from mvrisk.moments import population_moments

from conftest import aligned_error, random_truth

K2_M = np.array([[2.0, 1.0], [1.0, 3.0]])
K2_PI = np.array([0.4, 0.6])


def _k2_moments():
    return population_moments([K2_M] * 3, K2_PI)


def _cube(u):
    return np.einsum("i,j,k->ijk", u, u, u)


# -- whitening -------------------------------------------------------------------------

def test_identical_views_give_identity_correctors():
    wh = symmetrize_and_whiten(_k2_moments(), 2)
    np.testing.assert_allclose(wh.C1, np.eye(2), atol=1e-10)
    np.testing.assert_allclose(wh.C2, np.eye(2), atol=1e-10)


def test_whitening_map_whitens():
    wh = symmetrize_and_whiten(_k2_moments(), 2)
    np.testing.assert_allclose(wh.W.T @ wh.pairs3 @ wh.W, np.eye(2), atol=1e-10)


def test_whitening_identity_second_moment():
    # M_v = I and pi uniform scaled so that Pairs = I: pi_j = 1, use M = sqrt(2) I with pi = 1/2
    M = np.sqrt(2.0) * np.eye(2)
    mom = population_moments([M] * 3, [0.5, 0.5])
    wh = symmetrize_and_whiten(mom, 2)
    np.testing.assert_allclose(wh.pairs3, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(wh.W.T @ wh.W, np.eye(2), atol=1e-12)
    # T is the raw symmetrized triple seen through the orthogonal factor
    raw = mom.triple
    back = np.einsum("abc,ia,jb,kc->ijk", wh.T, wh.W, wh.W, wh.W)
    np.testing.assert_allclose(back, raw, atol=1e-12)


def test_rank_deficient_pairs_raise():
    M = np.array([[1.0, 1.0], [2.0, 2.0]])
    mom = population_moments([M, K2_M, K2_M], K2_PI)
    with pytest.raises(IllConditionedError) as info:
        symmetrize_and_whiten(mom, 2)
    assert info.value.singular_value is not None and info.value.singular_value < 1e-10


# -- tensor power method ------------------------------------------------------------------

def test_power_method_orthogonal_tensor():
    e = np.eye(2)
    T = 2 * _cube(e[0]) + _cube(e[1])
    eig = tensor_power_method(T, seed=3)
    np.testing.assert_allclose(eig.values, [2.0, 1.0], atol=1e-10)
    np.testing.assert_allclose(eig.vectors, np.eye(2), atol=1e-8)
    for j in range(2):
        u = eig.vectors[:, j]
        assert np.einsum("ijk,i,j,k->", T, u, u, u) > 0


def test_power_method_zero_tensor():
    with pytest.raises(NumericError):
        tensor_power_method(np.zeros((2, 2, 2)))


def test_power_method_rejects_asymmetric():
    T = np.zeros((2, 2, 2))
    T[0, 0, 1] = 1.0
    with pytest.raises(InputError):
        tensor_power_method(T)


def test_whitened_eigenvalues_are_inverse_sqrt_prior():
    wh = symmetrize_and_whiten(_k2_moments(), 2)
    eig = tensor_power_method(wh.T, seed=0)
    np.testing.assert_allclose(np.sort(eig.values), np.sort(K2_PI ** -0.5), atol=1e-8)
    # orthogonality and deflation residual
    np.testing.assert_allclose(eig.vectors.T @ eig.vectors, np.eye(2), atol=1e-6)
    assert np.linalg.norm(eig.residual) <= 1e-6 * np.linalg.norm(wh.T)


def test_power_method_deterministic_given_seed(rng):
    M, pi = random_truth(rng, 3)
    wh = symmetrize_and_whiten(population_moments(M, pi), 3)
    a = tensor_power_method(wh.T, seed=5)
    b = tensor_power_method(wh.T, seed=5)
    np.testing.assert_array_equal(a.vectors, b.vectors)


# -- recovery ---------------------------------------------------------------------------

def test_recover_k2_example():
    mom = _k2_moments()
    wh = symmetrize_and_whiten(mom, 2)
    est = recover_parameters(tensor_power_method(wh.T), wh, mom)
    assert aligned_error([K2_M] * 3, K2_PI, est.M, est.pi) <= 1e-6
    np.testing.assert_allclose(est.diagnostics["pi_tilde"], est.pi, atol=1e-8)


def test_prior_from_identity_view():
    mom = population_moments([np.eye(2)] * 3, [0.3, 0.7])
    est = decompose_moments(mom, 2)
    np.testing.assert_allclose(np.sort(est.pi), [0.3, 0.7], atol=1e-10)
    np.testing.assert_allclose(est.diagnostics["pi_raw"], est.pi, atol=1e-10)


def test_simplex_projection():
    np.testing.assert_allclose(project_to_simplex([0.6, -0.1, 0.6]), [0.5, 0.0, 0.5])
    with pytest.raises(NumericError):
        project_to_simplex([0.2, -1.0, 0.1])


def test_recover_rejects_non_positive_eigenvalues():
    from mvrisk.decomposition import TensorEigenpairs
    wh = Whitening(np.eye(2), np.zeros((2, 2, 2)), np.eye(2), np.eye(2), np.eye(2))
    with pytest.raises(InputError):
        recover_parameters(TensorEigenpairs(np.array([1.0, -1.0]), np.eye(2)), wh, _k2_moments())


# -- refinement -------------------------------------------------------------------------

def test_refine_at_truth_does_not_move():
    mom = _k2_moments()
    start = PlugInEstimate((K2_M,) * 3, K2_PI.copy())
    assert moment_residual(start, mom) <= 1e-28
    out = refine(start, mom)
    for a, b in zip(out.M, start.M):
        np.testing.assert_allclose(a, b, atol=1e-14)
    np.testing.assert_allclose(out.pi, K2_PI, atol=1e-14)
    assert out.residual <= 1e-28


def test_refine_from_recovered_is_exact(rng):
    M, pi = random_truth(rng, 3)
    mom = population_moments(M, pi)
    est = decompose_moments(mom, 3, DecompositionConfig(refine=True))
    assert aligned_error(M, pi, est.M, est.pi) <= 1e-8


def test_refine_without_triple_term(rng):
    M, pi = random_truth(rng, 2)
    mom = population_moments(M, pi)
    start = decompose_moments(mom, 2)
    perturbed = PlugInEstimate(tuple(Mv + 1e-3 for Mv in start.M), start.pi)
    out = refine(perturbed, mom, weights=(0.5, 0.25, 0.0), max_iter=5000)
    assert out.residual <= 1e-14


def test_refine_is_monotone(rng):
    M, pi = random_truth(rng, 3)
    mom = population_moments(M, pi)
    start = PlugInEstimate(tuple(Mv + rng.normal(scale=0.1, size=Mv.shape) for Mv in M),
                           np.array([0.5, 0.3, 0.2]))
    out = refine(start, mom, max_iter=200)
    hist = np.asarray(out.diagnostics["refine_history"])
    assert np.all(np.diff(hist) <= 0)
    assert hist[-1] < hist[0]


def test_refine_flags_iteration_cap(rng):
    M, pi = random_truth(rng, 3)
    mom = population_moments(M, pi)
    start = PlugInEstimate(tuple(Mv + 0.3 for Mv in M), np.full(3, 1 / 3))
    out = refine(start, mom, max_iter=2)
    assert "refine_max_iter" in out.warnings


# -- amplification ----------------------------------------------------------------------

def test_amplify_three_scalars():
    assert amplify([0.0, 0.01, 5.0], 0.05) == 0.0


def test_amplify_identical():
    items = [1.5, 1.5, 1.5, 1.5]
    assert amplify(items, 0.01) == 1.5


def test_amplify_nine_scalars():
    cluster = [2.0, 2.004, 2.01, 2.002, 2.006]
    outliers = [3.0, 1.0, 3.0, 1.0]
    mixed = [outliers[0], cluster[0], outliers[1], cluster[1], outliers[2], cluster[2],
             outliers[3], cluster[3], cluster[4]]
    assert amplify(mixed, 0.05) in cluster


def test_amplify_all_outliers():
    with pytest.raises(AmplificationError):
        amplify([0.0, 1.0, 2.0, 3.0], 0.05)
    with pytest.raises(InputError):
        amplify([0.0, 1.0], 0.05)


def test_amplify_matrix_estimates_align_columns(rng):
    M, pi = random_truth(rng, 3)
    good = PlugInEstimate(tuple(M), pi)
    swapped = good.permuted([2, 0, 1])
    bad = PlugInEstimate(tuple(Mv + 5 for Mv in M), pi)
    assert amplify([bad, swapped, good], 0.01) is swapped


def test_decompose_with_splits_uses_amplification(rng):
    M, pi = random_truth(rng, 2)
    n = 30000
    y = rng.choice(2, size=n, p=pi)
    H = [Mv[:, y].T + 0.2 * rng.normal(size=(n, 2)) for Mv in M]
    est = decompose_arrays(H, 2, DecompositionConfig(splits=3, amplify_eps=0.2))
    assert aligned_error(M, pi, est.M, est.pi) < 0.1


# -- end to end ----------------------------------------------------------------------------

def test_decompose_rejects_k1():
    with pytest.raises(InputError):
        decompose_moments(_k2_moments(), 1)


def test_decompose_logistic_generator(trained_logistic):
    model, cfg, gen = trained_logistic
    ds = gen.sample(10000, 11)
    est = decompose(ds.views, model, DecompositionConfig(refine=True))
    # labelled oracle on the same (normalized) loss vectors
    from mvrisk.moments import normalize_views
    H = [normalize_views(h)[0] for h in model.all_loss_vectors(ds.views)]
    true_M = [np.stack([h[ds.labels == j].mean(axis=0) for j in range(3)], axis=1) for h in H]
    true_pi = np.bincount(ds.labels, minlength=3) / ds.m
    perm = _best_alignment(true_M, est.M)
    assert np.abs(est.pi[perm] - gen.pi).max() <= 0.05
    assert np.abs(est.pi[perm] - true_pi).max() <= 0.05
    for Mt, Me in zip(true_M, est.M):
        assert np.abs(Mt - Me[:, perm]).max(axis=0).max() <= 0.1
    for key in ("lambda", "pi_min", "tau", "kappa"):
        assert key in est.diagnostics


def _best_alignment(ref, est):
    from mvrisk.matching import column_alignment
    return column_alignment(ref, est)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), k=st.integers(2, 4))
def test_exact_moments_permutation_equivariance(seed, k):
    rng = np.random.default_rng(seed)
    M, pi = random_truth(rng, k)
    base = decompose_moments(population_moments(M, pi), k)
    perm = rng.permutation(k)
    M2 = [Mv[:, perm] for Mv in M]
    moved = decompose_moments(population_moments(M2, pi[perm]), k)
    e1 = aligned_error(M, pi, base.M, base.pi)
    e2 = aligned_error(M2, pi[perm], moved.M, moved.pi)
    assert e1 <= 1e-6 and e2 <= 1e-6
    assert abs(e1 - e2) <= 1e-10 + 1e-6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), k=st.integers(2, 4),
       c=st.floats(0.1, 10.0))
def test_scale_consistency(seed, k, c):
    rng = np.random.default_rng(seed)
    M, pi = random_truth(rng, k)
    a = decompose_moments(population_moments(M, pi), k)
    b = decompose_moments(population_moments([c * Mv for Mv in M], pi), k)
    from mvrisk.matching import column_alignment
    perm = column_alignment([c * Mv for Mv in a.M], b.M)
    for Ma, Mb in zip(a.M, b.M):
        np.testing.assert_allclose(c * Ma, Mb[:, perm], atol=1e-8 * c * (1 + np.abs(Ma).max()))
    np.testing.assert_allclose(a.pi, b.pi[perm], atol=1e-8)


def test_config_round_trip():
    cfg = DecompositionConfig(refine=True, restarts=7)
    assert DecompositionConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InputError):
        DecompositionConfig.from_dict({"restart": 3})


def test_estimate_json_round_trip(rng):
    M, pi = random_truth(rng, 2)
    est = decompose_moments(population_moments(M, pi), 2)
    back = PlugInEstimate.from_dict(est.to_dict())
    for a, b in zip(est.M, back.M):
        np.testing.assert_array_equal(a, b)
    assert back.diagnostics["lambda"] == est.diagnostics["lambda"]


def test_m_trend(trained_logistic):
    model, cfg, gen = trained_logistic
    from mvrisk.moments import normalize_views
    from mvrisk.matching import column_alignment

    def error(m, seed):
        ds = gen.sample(m, 500 + seed)
        est = decompose(ds.views, model)
        H = [normalize_views(h)[0] for h in model.all_loss_vectors(ds.views)]
        Mt = [np.stack([h[ds.labels == j].mean(axis=0) for j in range(3)], axis=1) for h in H]
        perm = column_alignment(Mt, est.M)
        return max(np.abs(a - b[:, perm]).max() for a, b in zip(Mt, est.M))

    small = np.median([error(2500, s) for s in range(10)])
    large = np.median([error(40000, s) for s in range(10)])
    assert large < small
