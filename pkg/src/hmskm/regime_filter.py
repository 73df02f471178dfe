"""Exact posterior of the hidden regime given known rates and the event stream.

Between events the belief follows the normalized flow of the killed
transition matrix ``exp(t (G - diag(abar)))``; at an event it is reweighted
by the propensity of the observed reaction in each regime.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _kernels as K
from .errors import ImpossibleEventError, ModelArgumentError, SurvivalUnderflowError
from .kinetics import EventPath, RateParams, ReactionSystem, RegimeModel, path_arrays

SIMPLEX_TOL = 1e-10
UNDERFLOW = 1e-300


@dataclass(frozen=True, eq=False)
class RegimePosterior:
    """Probability vector over regimes; normalized on construction."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).reshape(-1).copy()
        if np.any(pi < 0) or not np.all(np.isfinite(pi)):
            raise ModelArgumentError("regime probabilities must be finite and nonnegative")
        s = pi.sum()
        if s <= 0:
            raise ModelArgumentError("regime probabilities sum to zero")
        object.__setattr__(self, "pi", pi / s)

    def __getitem__(self, i):
        return self.pi[i - 1]

    def __len__(self):
        return len(self.pi)


def _theta_matrix(sys, theta):
    if theta is None:
        return sys.rate_params.matrix
    if isinstance(theta, RateParams):
        return theta.matrix
    return np.asarray(theta, dtype=float).reshape(sys.qbar, sys.mbar)


def _pi_array(pi):
    return pi.pi if isinstance(pi, RegimePosterior) else np.asarray(pi, dtype=float)


def total_rates(sys: ReactionSystem, X, theta=None, t=0.0):
    """``abar(i)`` for every regime."""
    return _theta_matrix(sys, theta).T @ sys.h_vector(t, X)


def killed_generator(sys, regime_model, X, theta=None, t=0.0):
    return regime_model.G(t, X) - np.diag(total_rates(sys, X, theta, t))


def killed_transition_matrix(sys: ReactionSystem, regime_model: RegimeModel, X, theta, dt, t=0.0):
    """``exp(dt (G - diag(abar)))`` for rates frozen at state ``X``.

    Two regimes use the closed-form eigen-decomposition, more use Pade.
    """
    if dt < 0:
        raise ModelArgumentError("dt must be nonnegative")
    Q = killed_generator(sys, regime_model, X, theta, t)
    if Q.shape[0] == 2:
        return K.killed2(Q[0, 0], Q[0, 1], Q[1, 0], Q[1, 1], float(dt), np.empty((2, 2)))
    return linalg.expm(dt * Q)


def drift_pi(pi, sys, regime_model, X, theta, dt, t=0.0) -> RegimePosterior:
    """Belief after ``dt`` without events: ``p P(dt)`` renormalized."""
    p = _pi_array(pi) @ killed_transition_matrix(sys, regime_model, X, theta, dt, t)
    s = p.sum()
    if not s >= UNDERFLOW:
        raise SurvivalUnderflowError(f"survival mass {s:.3g} underflowed; split the {dt} interval")
    return RegimePosterior(p / s)


def jump_update_pi(pi, sys, q, t, X_pre, theta) -> RegimePosterior:
    """Bayes reweighting by the propensity of reaction ``q`` in each regime."""
    sys.check_reaction(q)
    rates = _theta_matrix(sys, theta)[q - 1] * sys.h(q, t, X_pre)
    p = _pi_array(pi) * rates
    if not p.sum() > 0:
        raise ImpossibleEventError(f"reaction {q} has zero propensity under every regime with positive belief")
    return RegimePosterior(p)


def two_state_belief_rate(p2, mu12, mu21, abar1, abar2):
    """Time derivative of the high-regime belief between events (two regimes)."""
    return mu12 * (1.0 - p2) - mu21 * p2 - (abar2 - abar1) * p2 * (1.0 - p2)


@dataclass(frozen=True)
class FilterOutput:
    """Belief at sample times and right after each event."""

    times: np.ndarray
    pi: np.ndarray
    is_event: np.ndarray

    def at_events(self):
        return self.times[self.is_event], self.pi[self.is_event]

    def value_at(self, t):
        """Belief at ``t`` (right-continuous lookup among emitted rows)."""
        k = np.searchsorted(self.times, t, side="right") - 1
        return self.pi[max(k, 0)]


def run_exact_filter(sys: ReactionSystem, regime_model: RegimeModel, theta, path: EventPath, pi0,
                     sample_times=None, grid=1.0) -> FilterOutput:
    """Filter the regime along ``path``.

    The belief is emitted after every event and at ``sample_times``
    (defaults to a grid of spacing ``grid`` from ``t0`` to ``t_end``).
    """
    theta = _theta_matrix(sys, theta)
    pi0 = RegimePosterior(_pi_array(pi0)).pi
    if len(pi0) != sys.mbar:
        raise ModelArgumentError("initial belief has the wrong length")
    if sample_times is None:
        sample_times = np.arange(path.t0, path.t_end + 1e-12, grid) if grid else np.empty(0)
    sample_times = np.sort(np.asarray(sample_times, dtype=float))
    _, rs, H, G, ends = path_arrays(sys, regime_model, path, include_tail=True)
    n_rows = len(ends) + len(sample_times) + 1
    out_t = np.empty(n_rows)
    out_pi = np.empty((n_rows, sys.mbar))
    out_ev = np.zeros(n_rows, dtype=np.bool_)
    rows = K.run_exact_filter(pi0, float(path.t0), ends, rs, H, G, np.ascontiguousarray(theta),
                              sample_times, out_t, out_pi, out_ev)
    if rows == -1:
        raise ImpossibleEventError("an observed reaction has zero propensity under the current belief")
    if rows == -2:
        raise SurvivalUnderflowError("survival mass underflowed")
    keep = np.ones(rows, dtype=bool)
    # the tail interval emits a non-event row at t_end; drop it if it duplicates a sample
    if rows >= 2 and not out_ev[rows - 1] and out_t[rows - 1] == out_t[rows - 2]:
        keep[rows - 1] = False
    return FilterOutput(out_t[:rows][keep], out_pi[:rows][keep], out_ev[:rows][keep])
