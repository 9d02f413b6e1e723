from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from nafbo.acquisitions import (
    EpsGreedyPool,
    GmmUcb,
    TafSourceModel,
    TransferAcquisition,
    af_feature_rows,
    discordant_pair_fraction,
    expected_improvement,
    linear_schedule,
    neural_af_value,
    probability_of_improvement,
    upper_confidence_bound,
)
from nafbo.gp import Dataset, GpHyperparams, KernelSpec, gp_condition
from nafbo.nets import Mlp


def make_posterior(x, y, lengthscale=0.2, signal=1.0, noise=1e-6, dim=1):
    hyper = GpHyperparams(
        KernelSpec("squared-exponential", np.full(dim, lengthscale), signal),
        noise,
    )
    return gp_condition(Dataset(np.atleast_2d(x), np.asarray(y, dtype=np.float64)), hyper)


def empty_posterior(dim=1):
    return make_posterior(np.zeros((0, dim)), np.zeros(0), dim=dim)


# ---------------------------------------------------------------------------
# closed forms against sampling / hand values


def test_ei_matches_monte_carlo():
    rng = np.random.default_rng(11)
    n = 400_000
    for mu, sigma, inc in itertools.product((-1.0, 0.0, 0.7), (0.05, 0.5, 2.0), (-0.5, 0.0, 1.3)):
        if (mu - inc) / sigma < -3.0:
            continue  # too few tail hits to estimate the SE; quadrature covers these
        draws = np.maximum(rng.normal(mu, sigma, size=n) - inc, 0.0)
        se = draws.std() / np.sqrt(n)
        closed = expected_improvement([mu], [sigma], inc)[0]
        assert abs(closed - draws.mean()) <= 3.0 * se + 1e-12


def test_ei_matches_quadrature_including_deep_tail():
    for mu, sigma, inc in itertools.product((-1.0, 0.0, 0.7), (0.05, 0.5, 2.0), (-0.5, 0.0, 1.3)):
        hi = max(inc + sigma, mu + 12.0 * sigma)
        oracle, _ = quad(lambda y: (y - inc) * norm.pdf(y, mu, sigma), inc, hi)
        closed = expected_improvement([mu], [sigma], inc)[0]
        assert closed == pytest.approx(oracle, rel=1e-9, abs=1e-13)


def test_ei_at_incumbent_mean_is_sigma_over_sqrt_2pi():
    for sigma in (0.1, 1.0, 3.7):
        ei = expected_improvement([2.0], [sigma], 2.0)[0]
        assert ei == pytest.approx(sigma / np.sqrt(2 * np.pi), rel=1e-14)


def test_ei_zero_sigma_is_exact_hinge():
    mu = np.array([-1.0, 0.3, 0.3000001, 2.0])
    out = expected_improvement(mu, np.zeros(4), 0.3)
    np.testing.assert_array_equal(out, np.maximum(mu - 0.3, 0.0))


def test_ei_monotone_in_mean_and_spread():
    mus = np.linspace(-2, 2, 41)
    ei = expected_improvement(mus, np.full(41, 0.4), 0.0)
    assert np.all(np.diff(ei) > 0)
    sigmas = np.linspace(0.01, 3, 40)
    ei = expected_improvement(np.full(40, -0.5), sigmas, 0.0)
    assert np.all(np.diff(ei) > 0)


def test_pi_matches_normal_cdf():
    rng = np.random.default_rng(3)
    mu = rng.normal(size=25)
    sigma = rng.uniform(0.01, 2, size=25)
    out = probability_of_improvement(mu, sigma, 0.2)
    np.testing.assert_allclose(out, norm.cdf((mu - 0.2) / sigma), rtol=1e-12)
    assert probability_of_improvement([1.0], [1.0], 1.0)[0] == pytest.approx(0.5)
    np.testing.assert_array_equal(
        probability_of_improvement([0.0, 1.0], [0.0, 0.0], 0.5), [0.0, 1.0]
    )


def test_ucb_is_mean_plus_beta_sigma():
    np.testing.assert_array_equal(upper_confidence_bound([1.0, -2.0], [0.5, 3.0]), [2.0, 4.0])
    assert upper_confidence_bound([1.0], [2.0], beta=0.0)[0] == 1.0


def test_linear_schedule_endpoints():
    assert linear_schedule(1, 20) == 1.0
    assert linear_schedule(20, 20) == 0.0
    assert linear_schedule(10, 19) == pytest.approx(0.5)
    assert linear_schedule(1, 1) == 0.0


# ---------------------------------------------------------------------------
# neural scoring head


def test_feature_row_layout():
    mu = np.array([0.1, 0.2])
    sigma = np.array([0.3, 0.4])
    pts = np.array([[0.5, 0.6], [0.7, 0.8]])
    rows = af_feature_rows(mu, sigma, pts, t=3, big_t=15, include_x=True)
    np.testing.assert_array_equal(
        rows, [[0.1, 0.3, 0.5, 0.6, 3.0, 15.0], [0.2, 0.4, 0.7, 0.8, 3.0, 15.0]]
    )
    rows = af_feature_rows(mu, sigma, pts, t=3, big_t=15, include_x=False)
    np.testing.assert_array_equal(rows, [[0.1, 0.3, 3.0, 15.0], [0.2, 0.4, 3.0, 15.0]])


def test_zeroed_network_scores_zero():
    net = Mlp([4, 8, 1], np.random.default_rng(0))
    net.set_params([np.zeros_like(p) for p in net.params()])
    feats = af_feature_rows(np.ones(5), np.ones(5), None, 1, 10, include_x=False)
    np.testing.assert_array_equal(neural_af_value(net, feats), np.zeros(5))


# ---------------------------------------------------------------------------
# ranking statistic


def brute_discordant(pred, actual):
    disc = valid = 0
    for (pi, ai), (pj, aj) in itertools.combinations(zip(pred, actual), 2):
        if ai == aj:
            continue
        valid += 1
        if (pi < pj) != (ai < aj):
            disc += 1
    return disc / valid if valid else 0.0


def test_discordant_fraction_hand_cases_and_oracle():
    assert discordant_pair_fraction(np.array([1, 2, 3.0]), np.array([10, 20, 30.0])) == 0.0
    assert discordant_pair_fraction(np.array([3, 2, 1.0]), np.array([10, 20, 30.0])) == 1.0
    assert discordant_pair_fraction(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0.0
    rng = np.random.default_rng(7)
    for _ in range(20):
        pred = rng.normal(size=8)
        actual = rng.integers(0, 4, size=8).astype(float)  # forces y ties
        assert discordant_pair_fraction(pred, actual) == brute_discordant(pred, actual)


# ---------------------------------------------------------------------------
# transfer acquisition


def test_no_sources_reduces_to_ei_exactly():
    post = make_posterior([[0.2], [0.5], [0.8]], [0.1, 0.9, 0.4])
    taf = TransferAcquisition([], mode="ranking")
    pts = np.linspace(0, 1, 40)[:, None]
    mu, var = post.predict(pts)
    ei = expected_improvement(mu, np.sqrt(var), 0.9)
    scores = taf.score(pts, post, incumbent=0.9)
    np.testing.assert_array_equal(scores, ei)
    taf = TransferAcquisition([], mode="variance")
    np.testing.assert_array_equal(taf.score(pts, post, incumbent=0.9), ei)


def test_ranking_weights_reward_agreement_and_drop_inversions():
    hist_x = np.array([[0.1], [0.4], [0.7], [0.95]])
    hist_y = np.array([0.5, 1.0, 2.0, 3.5])
    aligned = TafSourceModel(make_posterior(hist_x, hist_y, noise=1e-8))
    inverted = TafSourceModel(make_posterior(hist_x, -hist_y, noise=1e-8))
    taf = TransferAcquisition([aligned, inverted], mode="ranking")
    post = make_posterior(hist_x, hist_y)
    w = taf.weights(post)
    assert w.shape == (3,)
    assert w[0] == 1.0
    assert w[1] == 0.0


def test_variance_weights_favor_informed_source():
    hist_x = np.array([[0.45], [0.55]])
    near = TafSourceModel(make_posterior([[0.44], [0.50], [0.56]], [0.1, 0.2, 0.3]))
    # far source: all its data sits away from the target history
    far = TafSourceModel(make_posterior([[0.01], [0.99]], [0.0, 0.0], lengthscale=0.05))
    taf = TransferAcquisition([near, far], mode="variance")
    post = make_posterior(hist_x, [1.0, 2.0])
    w = taf.weights(post)
    assert w[0] > w[1]
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w > 0)


def test_fewer_than_two_observations_gives_uniform_weights():
    src = TafSourceModel(make_posterior([[0.5]], [1.0]))
    taf = TransferAcquisition([src], mode="ranking")
    np.testing.assert_array_equal(taf.weights(empty_posterior()), np.ones(2))
    one_obs = make_posterior([[0.3]], [0.2])
    np.testing.assert_array_equal(taf.weights(one_obs), np.ones(2))


def test_first_step_ranks_candidates_by_source_mean():
    # before any target data the EI term is constant, so the source
    # improvements alone order the candidates
    src_post = make_posterior([[0.2], [0.5], [0.8]], [0.0, 2.0, 1.0])
    taf = TransferAcquisition([TafSourceModel(src_post)], mode="ranking")
    pts = np.linspace(0.05, 0.95, 31)[:, None]
    scores = taf.score(pts, empty_posterior(), incumbent=0.0)
    mean, _ = src_post.predict(pts)
    assert np.argmax(scores) == np.argmax(mean)
    order = np.argsort(scores)
    np.testing.assert_array_equal(mean[order], np.sort(mean))


def test_source_ceilings_only_ratchet_upward():
    src = TafSourceModel(make_posterior([[0.2], [0.8]], [1.0, 3.0]))
    taf = TransferAcquisition([src], mode="ranking")
    mean_own, _ = src.posterior.predict(src.posterior.data.x)
    assert src.y_max == pytest.approx(mean_own.min())
    seen = [src.y_max]
    for x in (0.8, 0.2, 0.5, 0.81):
        taf.observe(np.array([x]))
        seen.append(src.y_max)
    assert all(b >= a for a, b in zip(seen, seen[1:]))
    high, _ = src.posterior.predict(np.array([[0.8]]))
    assert seen[1] == pytest.approx(high[0])
    assert seen[2] == seen[1]  # lower-mean point must not move the ceiling


def test_score_is_pointwise():
    rng = np.random.default_rng(5)
    src = TafSourceModel(make_posterior([[0.25], [0.75]], [0.3, 0.9]))
    taf = TransferAcquisition([src], mode="ranking")
    post = make_posterior([[0.1], [0.6], [0.9]], [0.2, 1.1, 0.7])
    pts = rng.uniform(size=(20, 1))
    batch = taf.score(pts, post, incumbent=1.1)
    singles = np.array([taf.score(p[None, :], post, 1.1)[0] for p in pts])
    np.testing.assert_allclose(batch, singles, rtol=1e-12)
    perm = rng.permutation(20)
    np.testing.assert_allclose(taf.score(pts[perm], post, 1.1), batch[perm], rtol=1e-12)


def test_transfer_mode_is_validated():
    with pytest.raises(ValueError, match="mode"):
        TransferAcquisition([], mode="cosine")


# ---------------------------------------------------------------------------
# density and pool baselines


def test_gmm_ucb_pure_density_peaks_at_design_cluster():
    rng = np.random.default_rng(2)
    designs = np.clip(rng.normal(0.3, 0.02, size=(40, 2)), 0, 1)
    af = GmmUcb(designs, n_components=2, weight=1.0, seed=0)
    post = empty_posterior(dim=2)
    pts = np.vstack([[0.3, 0.3], [0.9, 0.9], [0.31, 0.29], [0.05, 0.95]])
    scores = af.score(pts, post, t=1, big_t=10)
    assert scores[0] == 1.0  # min-max normalized, cluster center wins
    assert scores[1] < 0.1 and scores[3] < 0.1


def test_gmm_ucb_zero_weight_is_normalized_ucb():
    designs = np.random.default_rng(0).uniform(size=(10, 1))
    af = GmmUcb(designs, n_components=2, weight=0.0, seed=0)
    post = make_posterior([[0.2], [0.8]], [1.0, -1.0])
    pts = np.linspace(0, 1, 17)[:, None]
    mu, var = post.predict(pts)
    ucb = upper_confidence_bound(mu, np.sqrt(var))
    expect = (ucb - ucb.min()) / (ucb.max() - ucb.min())
    np.testing.assert_allclose(af.score(pts, post, 1, 10), expect, rtol=1e-12)


def test_gmm_ucb_linear_weight_moves_from_density_to_ucb():
    designs = np.random.default_rng(1).normal(0.25, 0.03, size=(30, 1)).clip(0, 1)
    af = GmmUcb(designs, n_components=1, weight="linear", seed=0)
    post = make_posterior([[0.9]], [2.0], lengthscale=0.05)
    pts = np.array([[0.25], [0.9]])
    early = af.score(pts, post, t=1, big_t=10)
    late = af.score(pts, post, t=10, big_t=10)
    assert early[0] > early[1]  # density dominates at the start
    assert late[1] > late[0]  # UCB dominates at the end


def test_gmm_ucb_degenerate_batch_scores_zero():
    designs = np.random.default_rng(4).uniform(size=(8, 1))
    af = GmmUcb(designs, n_components=1, weight=0.5, seed=0)
    scores = af.score(np.array([[0.4]]), empty_posterior(), t=1, big_t=10)
    np.testing.assert_array_equal(scores, [0.0])


def test_eps_greedy_pool_pops_each_design_once():
    designs = np.arange(10, dtype=np.float64)[:, None] / 10
    pool = EpsGreedyPool(designs)
    rng = np.random.default_rng(9)
    popped = sorted(float(pool.pop(rng)[0]) for _ in range(10))
    assert popped == [i / 10 for i in range(10)]
    assert pool.exhausted
    with pytest.raises(IndexError):
        pool.pop(rng)
    pool.begin_episode()
    assert not pool.exhausted
    assert pool.pop(rng).shape == (1,)
