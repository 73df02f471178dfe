import math

import numpy as np
import pytest
from scipy import integrate, stats

from hmskm.errors import DegenerateStateError, ModelArgumentError, PreconditionError
from hmskm.kinetics import (LOG_ZERO, EventPath, RateParams, RateTies, ReactionSystem, RegimeModel, SystemState,
                            check_generator, event_counts, make_law, path_arrays, path_log_likelihood, propensity,
                            reaction_type_likelihood, register_law, registered_laws, total_rate)
from hmskm.simulate import next_transition
from hmskm.sis import SISParams, build_sis


def test_sis_propensities_match_hand_values(sis):
    sys = sis[0]
    assert propensity(sys, 1, 0.0, [50], 1) == pytest.approx(0.235 * 52 * 9950 / 10000, rel=1e-14)
    assert propensity(sys, 1, 0.0, [50], 1) == pytest.approx(12.1589, abs=1e-9)
    assert propensity(sys, 2, 0.0, [50], 2) == pytest.approx(12.5, rel=1e-15)
    assert propensity(sys, 2, 0.0, [0], 1) == 0.0


def test_total_rate_examples(sis):
    sys = sis[0]
    assert total_rate(sys, 0.0, [50], 1) == pytest.approx(24.6589, abs=1e-9)
    assert total_rate(sys, 0.0, [50], 2) == pytest.approx(1.15 * 12.1589 + 12.5, abs=1e-9)
    assert total_rate(sys, 0.0, [50], 2) == pytest.approx(26.482735, abs=1e-6)


def test_total_rate_zero_when_all_factors_vanish():
    sys = ReactionSystem(np.array([[-1]]), (make_law("linear"),), RateParams.from_matrix([[2.0, 3.0]]))
    assert total_rate(sys, 0.0, [0], 1) == 0.0


def test_out_of_range_indices_raise(sis):
    sys = sis[0]
    with pytest.raises(ModelArgumentError):
        propensity(sys, 3, 0.0, [5], 1)
    with pytest.raises(ModelArgumentError):
        propensity(sys, 1, 0.0, [5], 3)
    with pytest.raises(ModelArgumentError):
        propensity(sys, 0, 0.0, [5], 1)


def test_reaction_type_likelihood_examples(sis):
    sys = sis[0]
    assert reaction_type_likelihood(sys, 1, 0.0, [50], 1) == pytest.approx(12.1589 / 24.6589, rel=1e-9)
    assert reaction_type_likelihood(sys, 1, 0.0, [50], 1) == pytest.approx(0.49309, abs=1e-5)
    assert reaction_type_likelihood(sys, 2, 0.0, [10_000], 1) == 1.0
    single = ReactionSystem(np.array([[1]]), (make_law("constant"),), RateParams.from_matrix([[0.3]]))
    assert reaction_type_likelihood(single, 1, 0.0, [4], 1) == 1.0


def test_reaction_type_likelihood_degenerate():
    sys, *_ = build_sis(SISParams(eta=0.0))
    with pytest.raises(DegenerateStateError):
        reaction_type_likelihood(sys, 1, 0.0, [0], 1)


def test_mass_action_law_vanishes_without_reactants():
    law = make_law("mass_action", reactants=[2, 1])
    assert law(0.0, np.array([1, 5])) == 0.0
    assert law(0.0, np.array([3, 5])) == pytest.approx(3 * 2 * 5)


def test_law_catalog_registration():
    assert {"mass_action", "sis_infection", "sis_recovery", "periodic"} <= set(registered_laws())
    with pytest.raises(ModelArgumentError):
        make_law("no_such_law")
    with pytest.raises(ModelArgumentError):
        register_law("linear")(lambda: None)


def test_generator_validation():
    check_generator([[-1, 1], [2, -2]])
    with pytest.raises(ModelArgumentError):
        check_generator([[-1, 2], [2, -2]])
    with pytest.raises(ModelArgumentError):
        check_generator([[1, -1], [2, -2]])


def test_rate_ties_expand():
    ties = RateTies([[0, 0], [1, 1]], [[1.0, 1.15], [1.0, 1.0]])
    assert np.allclose(ties.expand([0.2, 0.3]), [[0.2, 0.23], [0.3, 0.3]])
    with pytest.raises(ModelArgumentError):
        RateTies([[0, 2]], [[1.0, 1.0]])
    with pytest.raises(ModelArgumentError):
        RateParams([0.2, -1.0], ties)


def test_state_and_path_invariants():
    with pytest.raises(ModelArgumentError):
        SystemState(0.0, [-1], 1)
    with pytest.raises(ModelArgumentError):
        SystemState(0.0, [1], 0)
    with pytest.raises(ModelArgumentError):
        EventPath(0.0, [1], 1, [0.5, 0.4], [1, 1], 1.0)
    sys, *_ = build_sis(SISParams())
    bad = EventPath(0.0, [1], 1, [0.1, 0.2], [2, 2], 1.0, [], [])
    with pytest.raises(ModelArgumentError):
        bad.validate(sys)


def test_empty_path_log_likelihood_is_survival(sis):
    sys = sis[0]
    path = EventPath(0.0, [50], 1, [], [], 3.0, [], [])
    assert path_log_likelihood(sys, path) == pytest.approx(-3.0 * 24.6589, rel=1e-12)


def test_impossible_event_gives_log_zero(sis):
    sys = sis[0]
    path = EventPath(0.0, [0], 1, [0.5], [2], 1.0, [], [])
    assert path_log_likelihood(sys, path) == LOG_ZERO


def test_path_likelihood_needs_regime_path(sis):
    with pytest.raises(PreconditionError):
        path_log_likelihood(sis[0], EventPath(0.0, [5], 1, [], [], 1.0))


def test_rate_doubling_with_halved_gaps(sis):
    p = SISParams()
    sys = sis[0]
    fast, *_ = build_sis(p.with_(theta1=2 * p.theta1, theta2=2 * p.theta2))
    times = np.array([0.03, 0.05, 0.11, 0.2])
    reactions = np.array([1, 2, 2, 1])
    slow_path = EventPath(0.0, [50], 1, times, reactions, 0.25, [0.07], [2])
    fast_path = EventPath(0.0, [50], 1, times / 2, reactions, 0.125, [0.035], [2])
    diff = path_log_likelihood(fast, fast_path) - path_log_likelihood(sys, slow_path)
    assert diff == pytest.approx(len(times) * math.log(2.0), abs=1e-10)


def test_log_likelihood_additive_over_split(sis, short_path):
    sys = sis[0]
    cut = 2.3456789
    assert cut not in short_path.times
    head = short_path.window(sys.deltas, short_path.t0, cut)
    tail = short_path.window(sys.deltas, cut, short_path.t_end)
    total = path_log_likelihood(sys, short_path)
    assert path_log_likelihood(sys, head) + path_log_likelihood(sys, tail) == pytest.approx(total, abs=1e-10 * abs(total))


def test_one_event_density_matches_simulated_first_events():
    """Frozen regime: bin the first (time, type) outcome of the simulator against the likelihood."""
    p = SISParams(I0=20)
    sys, _, _, _ = build_sis(p)
    frozen = RegimeModel.constant(np.zeros((2, 2)))
    state = SystemState(0.0, [20], 2)
    rng = np.random.default_rng(7)
    n = 100_000
    edges = np.array([0.0, 0.01, 0.02, 0.04, 0.07, 0.12, 0.25, np.inf])
    counts = np.zeros((2, len(edges) - 1))
    for _ in range(n):
        tr = next_transition(sys, frozen, state, rng)
        counts[tr.index - 1, np.searchsorted(edges, tr.time, side="right") - 1] += 1

    def density(t, q):
        path = EventPath(0.0, [20], 2, [t], [q], t, [], [])
        return math.exp(path_log_likelihood(sys, path))

    probs = np.array([[integrate.quad(density, lo, hi, args=(q,), epsabs=1e-12)[0]
                       for lo, hi in zip(edges[:-1], edges[1:])] for q in (1, 2)])
    assert probs.sum() == pytest.approx(1.0, abs=1e-8)
    chi2 = np.sum((counts - n * probs) ** 2 / (n * probs))
    assert stats.chi2.sf(chi2, probs.size - 1) > 0.01


def test_event_counts_by_regime():
    path = EventPath(0.0, [5], 1, [0.1, 0.3, 0.6], [1, 2, 1], 1.0, [0.2, 0.5], [2, 1])
    assert event_counts(path, 2, 2).tolist() == [[2, 0], [0, 1]]


def test_path_arrays_layout(sis, short_path):
    sys, rm, _, _ = sis
    gaps, rs, H, G, ends = path_arrays(sys, rm, short_path)
    assert len(gaps) == short_path.n_events
    assert np.allclose(np.cumsum(gaps), short_path.times)
    assert H[0, 1] == short_path.X0[0]
    gaps2, rs2, *_ = path_arrays(sys, rm, short_path, include_tail=True)
    assert rs2[-1] == -1 and len(gaps2) == len(gaps) + 1
