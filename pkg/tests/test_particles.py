import math

import numpy as np
import pytest
from scipy import integrate, stats

from hmskm.conjugate import SufficientStats, update_stats
from hmskm.errors import FilterCollapseError, ModelArgumentError, PreconditionError
from hmskm.kinetics import EventPath, RateParams, RateTies, ReactionSystem, RegimeModel, make_law
from hmskm.particle_learning import (LWConfig, ParticleCloud, cloud_posterior_summary, ess, init_cloud,
                                     init_lw_cloud, liu_west_step, mixture_gamma_quantile, offspring_counts,
                                     path_bound_ratio, pl_step, point_mass_prior, predictive_likelihood, resample,
                                     run_particle_filter, sample_conditional_regime_path, shrinkage_move,
                                     storvik_step)
from hmskm.regime_filter import run_exact_filter
from hmskm.sis import SISParams, build_sis

SCHEMES = ["multinomial", "residual", "stratified", "systematic"]


def one_regime_sis():
    p = SISParams()
    laws = (make_law("sis_infection", N=p.N, eta=p.eta), make_law("sis_recovery"))
    sys = ReactionSystem(np.array([[1], [-1]]), laws, RateParams.from_matrix([[0.235], [0.25]]))
    rm = RegimeModel.constant(np.zeros((1, 1)))
    prior = SufficientStats.prior(sys.ties, 25.0, 100.0)
    return sys, rm, prior


def test_single_regime_predictive_is_exponential_race():
    sys, rm, _ = one_regime_sis()
    abar = 0.235 * 52 * 9950 / 1e4 + 12.5
    for q in (1, 2):
        val, parts = predictive_likelihood(sys, rm, 1, sys.rate_params, 0.07, q, [50])
        f = (0.235 * 52 * 9950 / 1e4 if q == 1 else 12.5) / abar
        assert val == pytest.approx(abar * math.exp(-abar * 0.07) * f, rel=1e-12)


def test_predictive_normalizes(sis):
    sys, rm, _, _ = sis
    for I, m in ((50, 1), (400, 2), (3, 1)):
        total = sum(integrate.quad(lambda g: predictive_likelihood(sys, rm, m, None, g, q, [I])[0], 0, np.inf,
                                   epsabs=1e-12, epsrel=1e-12, limit=200)[0] for q in (1, 2))
        assert total == pytest.approx(1.0, abs=1e-6)


def test_predictive_matches_eigen_form(sis):
    sys, rm, _, _ = sis
    Q = rm.G() - np.diag([1.15 * 0.235 * 52 * 9950 / 1e4 + 12.5, 0.235 * 52 * 9950 / 1e4 + 12.5][::-1])
    vals, vecs = np.linalg.eig(Q)
    P = (vecs @ np.diag(np.exp(0.05 * vals)) @ np.linalg.inv(vecs)).real
    alpha = np.array([0.235, 0.235 * 1.15]) * 52 * 9950 / 1e4
    expected = float(P[0] @ alpha)
    val, parts = predictive_likelihood(sys, rm, 1, None, 0.05, 1, [50])
    assert val == pytest.approx(expected, rel=1e-8)
    assert parts.sum() == pytest.approx(val, rel=1e-14)


def test_predictive_rejects_negative_gap(sis):
    with pytest.raises(ModelArgumentError):
        predictive_likelihood(sis[0], sis[1], 1, None, -0.1, 1, [5])


def test_no_seasonality_accepts_every_proposal():
    sys, rm, _, _ = build_sis(SISParams(SF=0.0, mu12=2.0, mu21=3.0))
    rng = np.random.default_rng(0)
    for _ in range(500):
        br = sample_conditional_regime_path(rm, sys, 1, None, 0.8, 2, [40], rng)
        assert br.proposals == 1 and not br.fallback


def test_conditional_endpoint_matches_predictive_split():
    sys, rm, _, _ = build_sis(SISParams(mu12=0.3, mu21=0.2, SF=0.6))
    rng = np.random.default_rng(3)
    gap, I = 0.4, 30
    _, parts = predictive_likelihood(sys, rm, 1, None, gap, 1, [I])
    target = parts / parts.sum()
    n = 100_000
    ends = np.array([sample_conditional_regime_path(rm, sys, 1, None, gap, 1, [I], rng).end for _ in range(n)])
    p_hat = np.mean(ends == 2)
    assert abs(p_hat - target[1]) <= 3 * math.sqrt(target[1] * (1 - target[1]) / n)


def test_bridge_occupation_sums_to_gap(sis):
    sys, rm, _, _ = sis
    br = sample_conditional_regime_path(rm, sys, 2, None, 3.0, 1, [200], np.random.default_rng(1))
    assert br.occupation.sum() == pytest.approx(3.0, rel=1e-12)
    assert br.end in (1, 2)
    value, bound = path_bound_ratio(np.array([10.0, 12.0]), np.array([4.0, 5.0]), br.occupation, br.end, 3.0)
    assert value <= bound


def test_conditional_path_preconditions(sis):
    sys, rm, _, _ = sis
    with pytest.raises(PreconditionError):
        sample_conditional_regime_path(rm, sys, 1, None, 0.0, 1, [5], np.random.default_rng(0))
    with pytest.raises(PreconditionError):
        sample_conditional_regime_path(rm, sys, 1, None, 0.1, 2, [0], np.random.default_rng(0))


def test_single_particle_stats_match_conjugate_update():
    """With the regime frozen the sampled path is deterministic, so J=1 PL reduces to conjugate updating."""
    sys, _, _, prior = build_sis(SISParams())
    frozen = RegimeModel.constant(np.zeros((2, 2)))
    times = np.array([0.02, 0.05, 0.09, 0.1, 0.16])
    reactions = np.array([1, 2, 1, 1, 2])
    path = EventPath(0.0, [50], 2, times, reactions, 0.16, [], [])
    run = run_particle_filter(sys, frozen, path, prior, 1, "pl", seed=4, snapshot_times=[0.16])
    cloud = run.snapshots[0.16]
    post = update_stats(prior, sys, path)
    assert np.array_equal(cloud.a[0], post.a)
    assert np.allclose(cloud.b[0], post.b, rtol=1e-12, atol=0)


def test_step_api_matches_driver(sis, short_path):
    sys, rm, _, prior = sis
    path = short_path.truncate(sys.deltas, 0.3)
    run = run_particle_filter(sys, rm, path, prior, 64, "pl", seed=8, snapshot_times=[0.3])
    cloud = init_cloud(prior, 64, np.random.default_rng(8), m0=1)
    X = path.X0.copy()
    t = 0.0
    for tau, q in zip(path.times, path.reactions):
        pl_step(cloud, sys, rm, t, tau, q, X)
        X = X + sys.deltas[q - 1]
        t = tau
    snap = run.snapshots[0.3]
    assert np.array_equal(cloud.m, snap.m)
    assert np.array_equal(cloud.a, snap.a)
    assert np.allclose(cloud.weights(), snap.weights())


def test_storvik_and_pl_agree_without_modulation(short_path):
    sys, rm, prior = one_regime_sis()
    path = EventPath(0.0, short_path.X0, 1, short_path.times, short_path.reactions, short_path.t_end)
    rng = np.random.default_rng(2)
    draws = {}
    for algo in ("pl", "storvik"):
        run = run_particle_filter(sys, rm, path, prior, 2000, algo, seed=1, snapshot_times=[path.t_end])
        c = run.snapshots[path.t_end]
        k = rng.choice(c.J, size=2000, p=c.weights())
        draws[algo] = rng.gamma(c.a[k, 0], 1.0 / c.b[k, 0])
    assert stats.ks_2samp(draws["pl"], draws["storvik"]).pvalue > 0.01


def test_storvik_weights_finite(sis, short_path):
    sys, rm, _, prior = sis
    cloud = init_cloud(prior, 500, np.random.default_rng(0), m0=1, trigger="ess")
    X = short_path.X0.copy()
    t = 0.0
    for tau, q in list(zip(short_path.times, short_path.reactions))[:50]:
        storvik_step(cloud, sys, rm, t, tau, q, X)
        X = X + sys.deltas[q - 1]
        t = tau
        w = cloud.weights()
        assert np.all(np.isfinite(cloud.logw)) and np.all(w >= 0) and w.sum() == pytest.approx(1.0)


def test_shrinkage_variance_identity():
    ties = RateTies.untied(1, 1)
    rng = np.random.default_rng(4)
    J = 100_000
    lt = rng.normal(0.3, 0.5, size=(J, 1))
    sigma2 = lt[:, 0].var()
    cloud = ParticleCloud(np.zeros(J, dtype=np.int64), np.zeros(J), ties, rng, log_theta=lt.copy())
    lw = LWConfig(0.97)
    shrinkage_move(cloud, lw)
    # variance after the move: a^2 s^2 + h^2 s^2 = s^2
    assert cloud.log_theta[:, 0].var() == pytest.approx(sigma2, rel=0.05)
    moved = cloud.log_theta[:, 0] - lw.shrinkage * lt[:, 0]
    assert moved.var() == pytest.approx(lw.h**2 * sigma2, rel=0.05)


def test_liu_west_unique_values(sis, short_path):
    sys, rm, _, prior = sis
    steps = list(zip(short_path.times, short_path.reactions))[:40]
    for move in (False, True):
        cloud = init_lw_cloud(prior, 1000, np.random.default_rng(6), m0=1)
        X = short_path.X0.copy()
        t = 0.0
        counts = []
        for tau, q in steps:
            liu_west_step(cloud, sys, rm, t, tau, q, X, move=move)
            X = X + sys.deltas[q - 1]
            t = tau
            counts.append(len(np.unique(cloud.log_theta[:, 0])))
        if move:
            # jitter restores diversity each step; only the final resample duplicates
            assert min(counts) >= 0.5 * cloud.J
        else:
            assert all(b <= a for a, b in zip(counts, counts[1:]))
            assert counts[-1] < 0.5 * cloud.J


def test_lw_config_validation():
    with pytest.raises(ModelArgumentError):
        LWConfig(1.0)
    assert LWConfig(0.6).shrinkage == pytest.approx(0.8)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_degenerate_weights_resample_to_one_particle(scheme):
    w = np.zeros(50)
    w[0] = 1.0
    assert np.all(offspring_counts(w, scheme, np.random.default_rng(0)) == np.eye(50)[0] * 50)


def test_uniform_weights_residual_is_identity():
    counts = offspring_counts(np.full(40, 1 / 40), "residual", np.random.default_rng(0))
    assert np.all(counts == 1)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_resampling_unbiased(scheme):
    rng = np.random.default_rng(11)
    w = rng.dirichlet(np.full(12, 0.7))
    trials = 10_000
    counts = np.array([offspring_counts(w, scheme, rng) for _ in range(trials)])
    mean = counts.mean(axis=0)
    se = counts.std(axis=0, ddof=1) / math.sqrt(trials)
    target = 12 * w
    assert np.all(np.abs(mean - target) <= 3 * np.maximum(se, 1e-12) + 1e-12)
    assert np.all(counts.sum(axis=1) == 12)


def test_resample_resets_weights_and_ess():
    ties = RateTies.untied(1, 2)
    rng = np.random.default_rng(0)
    cloud = ParticleCloud(np.array([0, 1, 1, 0]), np.log([0.1, 0.2, 0.3, 0.4]), ties, rng,
                          a=np.ones((4, 2)), b=np.ones((4, 2)))
    assert ess(cloud) == pytest.approx(1 / np.sum(np.array([0.1, 0.2, 0.3, 0.4]) ** 2))
    resample(cloud)
    assert np.all(cloud.logw == 0) and ess(cloud) == pytest.approx(4.0)


def test_identical_particles_summary_is_single_gamma():
    ties = RateTies.untied(1, 1)
    cloud = ParticleCloud(np.zeros(5, dtype=np.int64), np.zeros(5), ties, np.random.default_rng(0),
                          a=np.full((5, 1), 30.0), b=np.full((5, 1), 120.0))
    s = cloud_posterior_summary(cloud)
    assert s.mean[0, 0] == pytest.approx(0.25)
    assert s.median[0, 0] == pytest.approx(stats.gamma.ppf(0.5, 30, scale=1 / 120), rel=1e-10)
    assert s.upper[0, 0] == pytest.approx(stats.gamma.ppf(0.975, 30, scale=1 / 120), rel=1e-10)


def test_two_component_mixture_mean_and_quantile():
    ties = RateTies.untied(1, 1)
    a = np.array([[20.0], [60.0]])
    b = np.array([[100.0], [200.0]])
    cloud = ParticleCloud(np.zeros(2, dtype=np.int64), np.zeros(2), ties, np.random.default_rng(0), a=a, b=b)
    s = cloud_posterior_summary(cloud)
    assert s.mean[0, 0] == pytest.approx(0.5 * (0.2 + 0.3))
    rng = np.random.default_rng(9)
    comp = rng.integers(0, 2, size=1_000_000)
    x = rng.gamma(a[comp, 0], 1 / b[comp, 0])
    for p in (0.025, 0.5, 0.975):
        assert mixture_gamma_quantile(p, a[:, 0], b[:, 0], [0.5, 0.5]) == pytest.approx(np.quantile(x, p), abs=1e-3)


def test_summary_invariant_to_particle_order(sis, short_path):
    sys, rm, _, prior = sis
    run = run_particle_filter(sys, rm, short_path, prior, 300, "pl", seed=2, trigger="ess", snapshot_times=[5.0])
    c = run.snapshots[5.0]
    perm = np.random.default_rng(0).permutation(c.J)
    d = ParticleCloud(c.m[perm], c.logw[perm], c.ties, c.rng, a=c.a[perm], b=c.b[perm])
    s1, s2 = cloud_posterior_summary(c), cloud_posterior_summary(d)
    for f in ("pi", "mean", "lower", "median", "upper"):
        assert np.allclose(getattr(s1, f), getattr(s2, f), rtol=1e-9)


@pytest.mark.parametrize("algo", ["pl", "storvik", "lw"])
def test_deterministic_replay(sis, short_path, algo):
    sys, rm, _, prior = sis
    r1 = run_particle_filter(sys, rm, short_path, prior, 200, algo, seed=17, scheme="stratified")
    r2 = run_particle_filter(sys, rm, short_path, prior, 200, algo, seed=17, scheme="stratified")
    assert np.array_equal(r1.pi_hat, r2.pi_hat)
    assert np.allclose(r1.pi_hat.sum(axis=1), 1.0)


def test_theta2_statistics_shared_by_all_particles(sis, short_path):
    sys, rm, _, prior = sis
    run = run_particle_filter(sys, rm, short_path, prior, 500, "pl", seed=3, snapshot_times=[5.0])
    c = run.snapshots[5.0]
    assert np.all(c.a[:, 1] == c.a[0, 1])
    assert np.allclose(c.b[:, 1], c.b[0, 1], rtol=1e-12)


def test_collapse_raises_with_diagnostics():
    sys, rm, _, prior = build_sis(SISParams(N=10, I0=10))
    path = EventPath(0.0, [10], 1, [0.1], [1], 1.0)
    with pytest.raises(FilterCollapseError) as info:
        run_particle_filter(sys, rm, path, prior, 10, "pl", seed=0)
    assert info.value.event_index == 0


def test_bad_configuration():
    sys, rm, _, prior = build_sis(SISParams())
    path = EventPath(0.0, [50], 1, [], [], 1.0)
    with pytest.raises(ModelArgumentError):
        run_particle_filter(sys, rm, path, prior, 0, "pl")
    with pytest.raises(ModelArgumentError):
        run_particle_filter(sys, rm, path, prior, 10, "bootstrap")
    with pytest.raises(ModelArgumentError):
        init_cloud(prior, 10, np.random.default_rng(0), m0=1, scheme="nope")


@pytest.mark.slow
def test_pl_error_shrinks_with_particles(sis_params, sis, default_reference_path):
    """Known rates: sup error against the exact filter, median over seeds, decreases in J."""
    sys, rm, _, _ = sis
    start = default_reference_path.regime_times[0] - 10.0
    window = default_reference_path.window(sys.deltas, start, start + 25.0).hidden()
    fo = run_exact_filter(sys, rm, None, default_reference_path.hidden(), [1.0, 0.0], sample_times=[start])
    pi0 = fo.pi[np.searchsorted(fo.times, start, side="right") - 1]
    exact = run_exact_filter(sys, rm, None, window, pi0, sample_times=[])
    _, ex_pi = exact.at_events()
    prior = point_mass_prior(sys.rate_params)
    medians = []
    for J in (500, 2000, 5000):
        errs = [np.max(np.abs(run_particle_filter(sys, rm, window, prior, J, "pl", seed=(J, s), pi0=pi0).pi_hat[:, 1]
                              - ex_pi[:, 1])) for s in range(20)]
        medians.append(np.median(errs))
    assert medians[0] > medians[1] > medians[2]
