import itertools

import numpy as np
import pytest
from scipy.special import logsumexp

from mvrisk.data import gen_hmm_sequences
from mvrisk.errors import InputError, NumericError
from mvrisk.hmm import (HmmModel, forward_backward, hmm_risk, labeled_inner_risk,
                        labeled_position_losses, local_loss_views, sequence_log_posterior,
                        unary_position_risk)
from mvrisk.risk import risk_from_components

GAUSS_CONFIG = {"k": 2, "T": 6, "transition": [[0.8, 0.2], [0.3, 0.7]], "initial": [0.6, 0.4],
                "emission": {"type": "gaussian", "means": [[-1.0], [1.0]], "sd": 1.0}}


def random_chain(rng, k, alphabet=4):
    return HmmModel(k, rng.normal(size=(k, k)), rng.normal(size=k), "discrete",
                    log_probs=rng.normal(size=(k, alphabet)))


def enumerate_paths(hmm, x):
    """log p(y | x) for every label path of a single discrete sequence."""
    T = len(x)
    paths = list(itertools.product(range(hmm.k), repeat=T))
    scores = []
    for y in paths:
        s = hmm.log_init[y[0]] + sum(hmm.log_probs[y[t], x[t]] for t in range(T))
        s += sum(hmm.log_trans[y[t - 1], y[t]] for t in range(1, T))
        scores.append(s)
    scores = np.asarray(scores)
    return paths, scores - logsumexp(scores)


def enumerated_marginals(hmm, x):
    paths, logp = enumerate_paths(hmm, x)
    T, k = len(x), hmm.k
    p = np.exp(logp)
    unary = np.zeros((T, k))
    pair = np.zeros((T - 1, k, k))
    for y, w in zip(paths, p):
        for t in range(T):
            unary[t, y[t]] += w
        for t in range(1, T):
            pair[t - 1, y[t - 1], y[t]] += w
    return unary, pair


def test_uniform_chain_has_uniform_posteriors():
    hmm = HmmModel(2, np.zeros((2, 2)), None, "discrete", log_probs=np.zeros((2, 3)))
    mt = forward_backward(hmm, np.array([[0, 2, 1, 1, 0]]))
    np.testing.assert_allclose(mt.unary, 0.5, atol=1e-15)


@pytest.mark.parametrize("k,T", [(2, 3), (2, 6), (3, 4), (3, 5)])
def test_forward_backward_matches_enumeration(k, T):
    rng = np.random.default_rng(k * 10 + T)
    hmm = random_chain(rng, k)
    for _ in range(3):
        x = rng.integers(0, 4, size=T)
        unary, pair = enumerated_marginals(hmm, x)
        mt = forward_backward(hmm, x)
        np.testing.assert_allclose(mt.unary[0], unary, atol=1e-10)
        np.testing.assert_allclose(mt.pair[0], pair, atol=1e-10)


def test_single_position_posterior():
    rng = np.random.default_rng(0)
    hmm = random_chain(rng, 3)
    mt = forward_backward(hmm, np.array([2]))
    expected = np.exp(hmm.log_init + hmm.log_probs[:, 2])
    np.testing.assert_allclose(mt.unary[0, 0], expected / expected.sum(), atol=1e-14)


def test_messages_are_normalized():
    rng = np.random.default_rng(1)
    hmm = random_chain(rng, 3)
    mt = forward_backward(hmm, rng.integers(0, 4, size=(5, 7)))
    np.testing.assert_allclose(np.exp(mt.log_alpha).sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(mt.log_pred).sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(mt.log_beta.max(-1), 0.0, atol=0)
    np.testing.assert_allclose(mt.unary.sum(-1), 1.0, atol=1e-12)
    # pair marginals reduce to unary marginals on both sides
    np.testing.assert_allclose(mt.pair.sum(axis=3), mt.unary[:, :-1], atol=1e-12)
    np.testing.assert_allclose(mt.pair.sum(axis=2), mt.unary[:, 1:], atol=1e-12)


def test_zero_potential_rejected():
    cfg = dict(GAUSS_CONFIG, transition=[[1.0, 0.0], [0.5, 0.5]])
    with pytest.raises(NumericError):
        HmmModel.from_config(cfg)


def test_config_round_trip():
    hmm = HmmModel.from_config(GAUSS_CONFIG)
    back = HmmModel.from_config(hmm.to_dict())
    np.testing.assert_allclose(back.log_trans, hmm.log_trans)
    np.testing.assert_allclose(back.means, hmm.means)


# -- local loss views ------------------------------------------------------------------------

@pytest.mark.parametrize("emission", ["discrete", "gaussian"])
def test_local_loss_reconstruction(emission):
    rng = np.random.default_rng(4)
    if emission == "discrete":
        hmm = random_chain(rng, 3)
        obs = rng.integers(0, 4, size=(20, 6))
    else:
        hmm = HmmModel.from_config(GAUSS_CONFIG)
        obs = gen_hmm_sequences(GAUSS_CONFIG, 20, 0).obs
    k = hmm.k
    y = rng.integers(0, k, size=(20, 6))
    mt = forward_backward(hmm, obs)
    rows = np.arange(20)
    for t in range(1, 5):
        H, A = local_loss_views(hmm, obs, t, "unary", mt)
        loss = A - sum(h[rows, y[:, t]] for h in H)
        np.testing.assert_allclose(loss, -mt.log_unary[rows, t, y[:, t]], atol=1e-10)
    for t in range(2, 5):
        H, A = local_loss_views(hmm, obs, t, "pair", mt)
        lab = y[:, t - 1] * k + y[:, t]
        loss = A - sum(h[rows, lab] for h in H)
        np.testing.assert_allclose(loss, -mt.log_pair[rows, t - 1, y[:, t - 1], y[:, t]],
                                   atol=1e-10)


def test_uniform_unary_views():
    hmm = HmmModel(3, np.zeros((3, 3)), None, "discrete", log_probs=np.zeros((3, 2)))
    obs = np.array([[0, 1, 1, 0, 1]])
    H, A = local_loss_views(hmm, obs, 2, "unary")
    for h in (H[0], H[2]):
        assert np.all(h == h[:, :1])
    assert (A - sum(h[:, 1] for h in H))[0] == pytest.approx(np.log(3))


def test_pair_label_space_normalizes():
    rng = np.random.default_rng(2)
    hmm = random_chain(rng, 2)
    obs = rng.integers(0, 4, size=(6, 4))
    H, A = local_loss_views(hmm, obs, 2, "pair")
    assert all(h.shape == (6, 4) for h in H)
    np.testing.assert_allclose(np.exp(sum(H) - A[:, None]).sum(axis=1), 1.0, atol=1e-12)


def test_position_range_checks():
    hmm = HmmModel.from_config(GAUSS_CONFIG)
    obs = np.zeros((2, 5))
    with pytest.raises(InputError):
        local_loss_views(hmm, obs, 0, "unary")
    with pytest.raises(InputError):
        local_loss_views(hmm, obs, 4, "unary")
    with pytest.raises(InputError):
        local_loss_views(hmm, obs, 1, "pair")
    with pytest.raises(InputError):
        local_loss_views(hmm, obs, 2, "triple")


# -- identities ---------------------------------------------------------------------------------

@pytest.mark.parametrize("k,T", [(2, 4), (2, 6), (3, 5)])
def test_junction_tree_identity(k, T):
    rng = np.random.default_rng(T + 7 * k)
    hmm = random_chain(rng, k)
    x = rng.integers(0, 4, size=(1, T))
    paths, logp = enumerate_paths(hmm, x[0])
    for idx in rng.choice(len(paths), size=5, replace=False):
        y = np.asarray(paths[idx])[None]
        assert sequence_log_posterior(hmm, x, y)[0] == pytest.approx(logp[idx], abs=1e-10)


def test_inner_risk_is_inner_marginal():
    # -log p(y[1:T-1] | x) by enumeration, marginalizing the two boundary labels
    rng = np.random.default_rng(9)
    hmm = random_chain(rng, 2)
    T = 6
    x = rng.integers(0, 4, size=T)
    y = rng.integers(0, 2, size=T)
    paths, logp = enumerate_paths(hmm, x)
    keep = [i for i, p in enumerate(paths) if tuple(p[1:T - 1]) == tuple(y[1:T - 1])]
    expected = -logsumexp(logp[keep])
    assert labeled_inner_risk(hmm, x[None], y[None]) == pytest.approx(expected, abs=1e-10)


def test_oracle_plug_in_equals_labelled_mean():
    hmm = HmmModel.from_config(GAUSS_CONFIG)
    ds = gen_hmm_sequences(GAUSS_CONFIG, 2000, 3)
    mt = forward_backward(hmm, ds.obs)
    t = 2
    H, A = local_loss_views(hmm, ds.obs, t, "unary", mt)
    y = ds.labels[:, t]
    pi = np.bincount(y, minlength=2) / y.size
    M = [np.stack([h[y == j].mean(axis=0) for j in range(2)], axis=1) for h in H]
    plug = risk_from_components(float(A.mean()), M, pi, (0, 1))
    _, unary = labeled_position_losses(hmm, ds.obs, ds.labels, mt)
    assert plug == pytest.approx(unary[:, t].mean(), abs=1e-10)


# -- risk --------------------------------------------------------------------------------------

def test_uniform_chain_closed_form():
    k, T = 3, 7
    hmm = HmmModel(k, np.zeros((k, k)), None, "discrete", log_probs=np.zeros((k, 2)))
    obs = np.random.default_rng(0).integers(0, 2, size=(50, T))
    est = hmm_risk(hmm, obs)
    expected = (T - 3) * np.log(k ** 2) - (T - 4) * np.log(k)
    assert est.value == pytest.approx(expected, abs=1e-12)


def test_short_chain_rejected():
    hmm = HmmModel.from_config(GAUSS_CONFIG)
    with pytest.raises(InputError):
        hmm_risk(hmm, np.zeros((10, 3)))


def test_row_counts():
    k, T = 2, 7
    hmm = HmmModel(k, np.zeros((k, k)), None, "discrete", log_probs=np.zeros((k, 2)))
    est = hmm_risk(hmm, np.zeros((5, T), dtype=int))
    kinds = [r[0] for r in est.rows()]
    assert kinds.count("pair") == T - 3 and kinds.count("unary") == T - 4


def test_hmm_risk_matches_labeled_oracle():
    hmm = HmmModel.from_config(GAUSS_CONFIG)
    ds = gen_hmm_sequences(GAUSS_CONFIG, 5000, 1)
    est = hmm_risk(hmm, ds.obs, jobs=2)
    oracle = labeled_inner_risk(hmm, ds.obs, ds.labels)
    assert abs(est.value - oracle) <= 0.1
    doc = est.to_dict()
    assert set(doc["pair"]) == {"2", "3", "4"}


def test_unary_position_reports_failure_position():
    # identical rows make every view uninformative except through a singular direction
    hmm = HmmModel(2, np.log([[0.5, 0.5], [0.4, 0.6]]), None, "discrete",
                   log_probs=np.log([[0.5, 0.5], [0.5, 0.5]]))
    obs = np.random.default_rng(0).integers(0, 2, size=(200, 5))
    with pytest.raises(NumericError) as info:
        unary_position_risk(hmm, obs, 2)
    assert info.value.index == 2
