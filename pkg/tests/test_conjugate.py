import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from hmskm.conjugate import (SufficientStats, ci_halfwidth, posterior_density, posterior_interval, posterior_mean,
                             posterior_quantile, posterior_series, posterior_variance, sample_theta,
                             update_stats)
from hmskm.errors import ModelArgumentError, PreconditionError
from hmskm.kinetics import EventPath, RateTies
from hmskm.sis import theta1_reduced_posterior


def test_empty_segment_leaves_stats_unchanged(sis):
    sys, _, _, prior = sis
    empty = EventPath(0.0, [50], 1, [], [], 0.0, [], [])
    assert update_stats(prior, sys, empty) == prior


def test_one_recovery_event_hand_values(sis):
    sys, _, _, prior = sis
    delta = 0.0371
    seg = EventPath(0.0, [50], 2, [delta], [2], delta, [], [])
    post = update_stats(prior, sys, seg)
    assert post.a[1] == prior.a[1] + 1
    assert post.rate_exact[1] - prior.rate_exact[1] == Fraction(50.0) * Fraction(delta)
    # the infection statistic integrates the high-season coefficient
    h1 = (50 + 2) * (10_000 - 50) / 10_000
    assert post.rate_exact[0] - prior.rate_exact[0] == Fraction(1.15) * Fraction(h1) * Fraction(delta)


def test_missing_regime_path_is_rejected(sis):
    sys, _, _, prior = sis
    with pytest.raises(PreconditionError):
        update_stats(prior, sys, EventPath(0.0, [50], 1, [0.1], [2], 1.0))


def test_updates_compose_exactly(sis, short_path):
    sys, _, _, prior = sis
    u = 1.7
    head = short_path.window(sys.deltas, short_path.t0, u)
    tail = short_path.window(sys.deltas, u, short_path.t_end)
    assert update_stats(update_stats(prior, sys, head), sys, tail) == update_stats(prior, sys, short_path)


def test_stats_monotone_along_path(sis, short_path):
    sys, _, _, prior = sis
    prev = prior
    for t in np.linspace(0.5, 5.0, 10):
        cur = update_stats(prior, sys, short_path.truncate(sys.deltas, t))
        assert np.all(cur.a >= prev.a) and np.all(cur.b >= prev.b)
        prev = cur


def test_reduced_theta1_posterior_matches_tied_panel(sis_params, sis, short_path):
    sys, _, _, prior = sis
    post = update_stats(prior, sys, short_path)
    a, b = theta1_reduced_posterior(short_path, sis_params)
    assert post.a[0] == a
    assert post.rate_exact[0] == b


def test_posterior_summaries():
    ties = RateTies.untied(1, 1)
    s = SufficientStats.prior(ties, 25.0, 100.0)
    assert posterior_mean(s, 1, 1) == 0.25
    assert posterior_variance(s, 1, 1) == pytest.approx(25 / 100**2)
    one = SufficientStats.prior(ties, 1.0, 1.0)
    assert posterior_quantile(one, 1, 1, 0.5) == pytest.approx(math.log(2.0), rel=1e-12)
    assert posterior_density(one, 1, 1, 0.3) == pytest.approx(math.exp(-0.3))
    lo, hi = posterior_interval(s, 1, 1)
    assert lo == pytest.approx(stats.gamma.ppf(0.025, 25, scale=0.01), rel=1e-10)
    assert hi == pytest.approx(stats.gamma.ppf(0.975, 25, scale=0.01), rel=1e-10)
    assert ci_halfwidth(s, 1, 1) == pytest.approx((hi - lo) / 2)


def test_scenario_prior_range():
    s = SufficientStats.prior(RateTies.untied(1, 1), 1700.0, 7300.0)
    assert posterior_mean(s, 1, 1) == pytest.approx(0.23288, abs=5e-6)
    lo, hi = posterior_quantile(s, 1, 1, 0.001), posterior_quantile(s, 1, 1, 0.999)
    assert lo == pytest.approx(stats.gamma.ppf(0.001, 1700, scale=1 / 7300), rel=1e-10)
    assert hi == pytest.approx(stats.gamma.ppf(0.999, 1700, scale=1 / 7300), rel=1e-10)
    # the 99.8% band is [0.2158, 0.2507]; the 99% band sits inside [0.21, 0.25]
    assert 0.21 < lo and hi == pytest.approx(0.2507, abs=1e-4)
    assert 0.21 <= posterior_quantile(s, 1, 1, 0.005) < posterior_quantile(s, 1, 1, 0.995) <= 0.25


def test_quantile_relative_accuracy():
    s = SufficientStats.prior(RateTies.untied(1, 1), 3.7, 2.2)
    for p in (1e-6, 0.01, 0.3, 0.9, 0.999999):
        x = posterior_quantile(s, 1, 1, p)
        assert stats.gamma.cdf(x, 3.7, scale=1 / 2.2) == pytest.approx(p, rel=1e-10)


def test_tied_shape_rate(sis):
    prior = sis[3]
    a, b = prior.shape_rate(1, 2)
    assert a == 25.0 and b == pytest.approx(100 / 1.15)


def test_sampling_moments(rng):
    s = SufficientStats.prior(RateTies.untied(1, 1), 25.0, 100.0)
    draws = np.array([sample_theta(s, rng).values[0] for _ in range(20_000)])
    vec = rng.gamma(np.full(100_000, 25.0), 1 / 100.0)
    assert draws.mean() == pytest.approx(0.25, rel=0.01)
    assert vec.var() == pytest.approx(2.5e-3, rel=0.05)


def test_concentrated_draws(rng):
    s = SufficientStats.prior(RateTies.untied(1, 1), 1e8, 1e8)
    assert abs(sample_theta(s, rng).values[0] - 1.0) < 1e-3


def test_seeded_draws_reproduce():
    s = SufficientStats.prior(RateTies.untied(2, 2), 2.0, 3.0)
    a = sample_theta(s, np.random.default_rng(5)).values
    b = sample_theta(s, np.random.default_rng(5)).values
    assert np.array_equal(a, b)


def test_invalid_prior():
    with pytest.raises(ModelArgumentError):
        SufficientStats.prior(RateTies.untied(1, 1), 0.0, 1.0)


def test_mismatched_ties(sis, short_path):
    other = SufficientStats.prior(RateTies.untied(2, 2), 1.0, 1.0)
    with pytest.raises(ModelArgumentError):
        update_stats(other, sis[0], short_path)


def test_posterior_series_matches_direct_updates(sis, short_path):
    sys, _, _, prior = sis
    rows = posterior_series(sys, short_path, prior, [1.0, 2.5, 5.0])
    assert rows.shape == (12, 6)
    for t in (1.0, 2.5, 5.0):
        direct = update_stats(prior, sys, short_path.truncate(sys.deltas, t))
        for q in (1, 2):
            row = rows[(rows[:, 0] == t) & (rows[:, 1] == q) & (rows[:, 2] == 1)][0]
            assert row[3] == pytest.approx(posterior_mean(direct, q, 1), rel=1e-10)
            assert row[4] == pytest.approx(posterior_quantile(direct, q, 1, 0.025), rel=1e-8)


def test_full_path_posterior_covers_truth(sis_params, sis, default_reference_path):
    sys, _, _, prior = sis
    post = update_stats(prior, sys, default_reference_path)
    for q, truth in ((1, sis_params.theta1), (2, sis_params.theta2)):
        lo, hi = posterior_interval(post, q, 1)
        assert lo <= truth <= hi
