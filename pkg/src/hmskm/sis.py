"""Seasonal SIS epidemic: two reactions (infection, recovery) on the
infecteds count, with a two-state high/low season factor.

Infectiousness in the high season is tied to the low-season value through
a known seasonality ratio ``SF``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from fractions import Fraction

import numpy as np
from numba import njit

from .conjugate import SufficientStats
from .errors import ModelArgumentError, PreconditionError
from .kinetics import (EventPath, RateParams, RateTies, ReactionSystem, RegimeModel, SystemState,
                       iter_segments, make_law, reaction_type_likelihood)

INFECTION, RECOVERY = 1, 2
LOW, HIGH = 1, 2


@dataclass(frozen=True)
class SISParams:
    N: int = 10_000
    eta: float = 2.0
    theta1: float = 0.235
    SF: float = 0.15
    theta2: float = 0.25
    mu12: float = 6 / 365
    mu21: float = 2 / 365
    I0: int = 50
    M0: int = LOW
    T: float = 273.0
    prior_a1: float = 25.0
    prior_b1: float = 100.0
    prior_a2: float = 25.0
    prior_b2: float = 100.0

    def __post_init__(self):
        if self.N < 1:
            raise ModelArgumentError("population must be at least 1")
        if not 0 <= self.I0 <= self.N:
            raise ModelArgumentError("initial infecteds must lie in [0, N]")
        if self.SF < 0 or self.eta < 0:
            raise ModelArgumentError("SF and eta must be nonnegative")
        if self.theta1 <= 0 or self.theta2 <= 0:
            raise ModelArgumentError("rates must be positive")
        if self.M0 not in (LOW, HIGH):
            raise ModelArgumentError("initial season must be 1 (low) or 2 (high)")

    @property
    def theta1_high(self):
        return self.ties().expand([self.theta1, self.theta2])[0, 1]

    def ties(self):
        return RateTies(np.array([[0, 0], [1, 1]]), np.array([[1.0, 1.0 + self.SF], [1.0, 1.0]]))

    def generator(self):
        return np.array([[-self.mu12, self.mu12], [self.mu21, -self.mu21]])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ModelArgumentError(f"unknown SIS fields: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)


def build_sis(p: SISParams):
    """System, regime model, initial state and prior statistics."""
    laws = (make_law("sis_infection", N=p.N, eta=p.eta), make_law("sis_recovery"))
    rates = RateParams(np.array([p.theta1, p.theta2]), p.ties())
    sys = ReactionSystem(np.array([[1], [-1]]), laws, rates, species=("I",), reactions=("infection", "recovery"))
    regime_model = RegimeModel.constant(p.generator())
    state = SystemState(0.0, np.array([p.I0]), p.M0)
    prior = SufficientStats.prior(p.ties(), [p.prior_a1, p.prior_a2], [p.prior_b1, p.prior_b2])
    return sys, regime_model, state, prior


def sis_propensities(I, i, p: SISParams):
    th1 = p.theta1 if i == LOW else p.theta1_high
    return th1 * ((I + p.eta) * (p.N - I) / p.N), p.theta2 * I


def carrying_capacity(p: SISParams, i):
    """Positive root of the deterministic balance of infection and recovery."""
    th = p.theta1 if i == LOW else p.theta1_high
    N, eta, th2 = float(p.N), float(p.eta), p.theta2
    lin = th * (N - eta) - th2 * N
    disc = math.sqrt(lin * lin + 4.0 * th * th * eta * N)
    if lin >= 0:
        return (lin + disc) / (2.0 * th)
    if eta == 0:
        return 0.0
    return 2.0 * th * eta * N / (disc - lin)


def sis_reaction_likelihood(I, i, r, p: SISParams):
    """Probability that the next reaction is an infection (``r=+1``) or recovery (``r=-1``)."""
    if r not in (1, -1):
        raise ModelArgumentError("r must be +1 or -1")
    sys, _, _, _ = build_sis(p)
    return reaction_type_likelihood(sys, INFECTION if r == 1 else RECOVERY, 0.0, [I], i)


def theta1_reduced_posterior(path: EventPath, p: SISParams):
    """``(a1 + infections, b1 + int (1 + SF 1{M=2}) h_1 ds)`` computed directly.

    The rate is returned as an exact rational.
    """
    if not path.has_regime_path:
        raise PreconditionError("needs the regime path")
    sys, _, _, _ = build_sis(p)
    high = Fraction(float(1.0 + p.SF))
    a = p.prior_a1
    b = Fraction(float(p.prior_b1))
    for start, stop, X, M, q in iter_segments(sys, path):
        h = sys.h(INFECTION, start, X)
        if h:
            b += (high if M == HIGH else 1) * Fraction(h) * (Fraction(stop) - Fraction(start))
        if q == INFECTION:
            a += 1
    return a, b


# ---------------------------------------------------------------------------
# fast simulator
# ---------------------------------------------------------------------------

@njit(cache=True)
def sis_race(I0, M0, t0, T, N, eta, th1, th2, G, rng, max_n):
    """Gillespie race for the SIS system; same draws as the generic simulator.

    ``th1`` holds the infection rate per regime; regimes are 0-based.
    Returns event times/types and regime-switch times/states.
    """
    ev_t = np.empty(max_n)
    ev_q = np.empty(max_n, dtype=np.int64)
    rg_t = np.empty(max_n)
    rg_m = np.empty(max_n, dtype=np.int64)
    ne = 0
    nr = 0
    t = t0
    I = I0
    M = M0
    t_end = t0 + T
    mb = G.shape[0]
    while ne + nr < max_n:
        Ifl = float(I)
        a1 = th1[M] * ((Ifl + eta) * (N - Ifl) / N) if I < N else 0.0
        a2 = th2 * Ifl if I > 0 else 0.0
        abar = 0.0 + a1 + a2
        leave = -G[M, M]
        dt_m = rng.exponential() / leave if leave > 0 else np.inf
        dt_r = rng.exponential() / abar if abar > 0 else np.inf
        if dt_m == np.inf and dt_r == np.inf:
            break
        if dt_r <= dt_m:
            tn = t + dt_r
            u = rng.random() * abar
            if tn > t_end:
                break
            q = 0 if (a1 > 0 and u < a1) or a2 <= 0 else 1
            t = tn
            I += 1 if q == 0 else -1
            ev_t[ne] = t
            ev_q[ne] = q + 1
            ne += 1
        else:
            tn = t + dt_m
            u = rng.random() * leave
            if tn > t_end:
                break
            acc = 0.0
            j = M
            for k in range(mb):
                if k == M or G[M, k] <= 0:
                    continue
                acc += G[M, k]
                j = k
                if u < acc:
                    break
            t = tn
            M = j
            rg_t[nr] = t
            rg_m[nr] = M + 1
            nr += 1
    return ev_t[:ne], ev_q[:ne], rg_t[:nr], rg_m[:nr]


def simulate_sis(p: SISParams, rng=None, seed=None, horizon=None, regime_fixed=False) -> EventPath:
    """Simulate the SIS system with its season factor on ``[0, T]``.

    ``regime_fixed`` freezes the season at ``M0``.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    T = p.T if horizon is None else horizon
    G = np.zeros((2, 2)) if regime_fixed else p.generator()
    th1 = np.array([p.theta1, p.theta1_high])
    max_n = 1000 + int(20 * p.N * max(th1.max(), p.theta2) * T / 10 + 50 * T)
    ev_t, ev_q, rg_t, rg_m = sis_race(int(p.I0), p.M0 - 1, 0.0, float(T), float(p.N), float(p.eta),
                                      th1, float(p.theta2), G, rng, max_n)
    if len(ev_t) + len(rg_t) >= max_n:
        raise RuntimeError("transition buffer exhausted; increase the buffer size")
    return EventPath(0.0, [p.I0], p.M0, ev_t, ev_q, float(T), rg_t, rg_m)


def infecteds_series(path: EventPath):
    """``(times, I)`` after each event, starting with ``(t0, I0)``."""
    I = path.X0[0] + np.concatenate([[0], np.cumsum(np.where(path.reactions == INFECTION, 1, -1))])
    return np.concatenate([[path.t0], path.times]), I
