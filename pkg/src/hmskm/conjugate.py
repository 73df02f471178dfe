"""Gamma-conjugate posterior of the rates given a fully observed path.

Shapes count events, rates integrate the mass-action factor over the time
spent in each regime. Linear ties let several ``(q, i)`` cells share one
Gamma pair; the tie coefficient multiplies the integrand.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import special, stats

from .errors import ModelArgumentError, PreconditionError
from .kinetics import EventPath, RateParams, RateTies, ReactionSystem, integrated_h, iter_segments


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Shape/rate panel over the free rate parameters.

    ``rate_exact`` keeps each rate as an exact rational so that updates
    compose without rounding drift; ``b`` is its float view.
    """

    a: np.ndarray
    rate_exact: tuple
    ties: RateTies
    prior_a: np.ndarray
    prior_b: np.ndarray

    @classmethod
    def prior(cls, ties: RateTies, shape, rate):
        a = np.broadcast_to(np.asarray(shape, dtype=float), (ties.n_free,)).copy()
        b = np.broadcast_to(np.asarray(rate, dtype=float), (ties.n_free,)).copy()
        if np.any(a <= 0) or np.any(b <= 0):
            raise ModelArgumentError("Gamma prior shape and rate must be positive")
        return cls(a, tuple(Fraction(float(x)) for x in b), ties, a.copy(), b.copy())

    @property
    def b(self):
        return np.array([float(x) for x in self.rate_exact])

    def shape_rate(self, q, i):
        """Gamma(shape, rate) law of ``theta_q(i)`` (1-based indices)."""
        p = self.ties.index[q - 1, i - 1]
        c = self.ties.coef[q - 1, i - 1]
        return float(self.a[p]), float(self.rate_exact[p]) / c

    def with_increments(self, da, db):
        a = self.a + np.asarray(da, dtype=float)
        rates = tuple(r + d for r, d in zip(self.rate_exact, db))
        return SufficientStats(a, rates, self.ties, self.prior_a, self.prior_b)

    def __eq__(self, other):
        return (
            isinstance(other, SufficientStats)
            and self.ties == other.ties
            and np.array_equal(self.a, other.a)
            and self.rate_exact == other.rate_exact
        )


def stat_increments(sys: ReactionSystem, path: EventPath):
    """Exact ``(da, db)`` contributed by a fully observed path."""
    if not path.has_regime_path:
        raise PreconditionError("sufficient statistics need the regime path")
    index, coef = sys.ties.index, sys.ties.coef
    P = sys.ties.n_free
    da = np.zeros(P)
    db = [Fraction(0)] * P
    coef_f = [[Fraction(float(c)) for c in row] for row in coef]
    for start, stop, X, M, q in iter_segments(sys, path):
        dt = Fraction(stop) - Fraction(start)
        if dt:
            for k in range(sys.qbar):
                if sys.laws[k].time_dependent:
                    db[index[k, M - 1]] += coef_f[k][M - 1] * Fraction(integrated_h(sys, k + 1, start, stop, X))
                else:
                    h = sys.h(k + 1, start, X)
                    if h:
                        db[index[k, M - 1]] += coef_f[k][M - 1] * Fraction(h) * dt
        if q is not None:
            da[index[q - 1, M - 1]] += 1
    return da, db


def update_stats(s: SufficientStats, sys: ReactionSystem, path_segment: EventPath) -> SufficientStats:
    """Add the counts and integrated factors of a fully observed segment."""
    if sys.ties != s.ties:
        raise ModelArgumentError("statistics and system use different rate ties")
    da, db = stat_increments(sys, path_segment)
    return s.with_increments(da, db)


def posterior_mean(s: SufficientStats, q, i):
    a, b = s.shape_rate(q, i)
    return a / b


def posterior_variance(s: SufficientStats, q, i):
    a, b = s.shape_rate(q, i)
    return a / b**2


def posterior_density(s: SufficientStats, q, i, x):
    a, b = s.shape_rate(q, i)
    return stats.gamma.pdf(x, a, scale=1.0 / b)


def posterior_quantile(s: SufficientStats, q, i, p):
    a, b = s.shape_rate(q, i)
    return special.gammaincinv(a, p) / b


def posterior_interval(s: SufficientStats, q, i, level=0.95):
    lo = (1.0 - level) / 2.0
    return posterior_quantile(s, q, i, lo), posterior_quantile(s, q, i, 1.0 - lo)


def sample_theta(s: SufficientStats, rng) -> RateParams:
    """Independent Gamma draws of the free rates."""
    draws = rng.gamma(s.a, 1.0 / s.b)
    return RateParams(np.maximum(draws, np.finfo(float).tiny), s.ties)


def posterior_series(sys: ReactionSystem, path: EventPath, prior: SufficientStats, times, level=0.95):
    """Posterior summaries at each of ``times`` (events at a time count).

    Returns rows ``(time, q, i, mean, lower, upper)`` for every cell.
    """
    times = np.sort(np.asarray(times, dtype=float))
    times = times[(times >= path.t0) & (times <= path.t_end)]
    rows = []
    index, coef = sys.ties.index, sys.ties.coef
    a = prior.a.copy()
    b = prior.b.copy()
    lo = (1.0 - level) / 2.0

    def emit(t, b_now):
        for q in range(sys.qbar):
            for i in range(sys.mbar):
                p, c = index[q, i], coef[q, i]
                rate = b_now[p] / c
                rows.append((t, q + 1, i + 1, a[p] / rate,
                             special.gammaincinv(a[p], lo) / rate,
                             special.gammaincinv(a[p], 1.0 - lo) / rate))

    k = 0
    for start, stop, X, M, q in iter_segments(sys, path):
        h = sys.h_vector(start, X)
        slope = np.zeros_like(b)
        for r in range(sys.qbar):
            slope[index[r, M - 1]] += coef[r, M - 1] * h[r]
        while k < len(times) and times[k] < stop:
            emit(times[k], b + slope * (times[k] - start))
            k += 1
        b += slope * (stop - start)
        if q is not None:
            a[index[q - 1, M - 1]] += 1
    while k < len(times):
        emit(times[k], b)
        k += 1
    return np.array(rows, dtype=float).reshape(-1, 6)


def ci_halfwidth(s: SufficientStats, q, i, level=0.95):
    lo, hi = posterior_interval(s, q, i, level)
    return 0.5 * (hi - lo)
