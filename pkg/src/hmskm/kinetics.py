"""Markov-modulated reaction systems and their exact path likelihood.

Reaction types and regimes are numbered from 1 in every public function
and in :class:`EventPath`; arrays indexed by them are 0-based internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping

import numpy as np
from scipy import integrate

from .errors import DegenerateStateError, ModelArgumentError, PreconditionError

#: Sentinel for log(0); likelihood code returns it instead of raising.
LOG_ZERO = -math.inf

QUAD_ABS_TOL = 1e-9


# ---------------------------------------------------------------------------
# mass-action catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MassActionLaw:
    """Rate factor ``h_q(t, X)`` of one reaction channel.

    ``batch`` optionally evaluates a time-homogeneous law on a stack of
    states of shape ``(n, d)``.
    """

    name: str
    fn: Callable[[float, np.ndarray], float]
    time_dependent: bool = False
    params: Mapping = field(default_factory=dict)
    batch: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, t, X):
        return self.fn(t, X)


_CATALOG: dict[str, Callable[..., MassActionLaw]] = {}


def register_law(name):
    """Register a factory ``f(**params) -> MassActionLaw`` under ``name``."""

    def deco(factory):
        if name in _CATALOG:
            raise ModelArgumentError(f"mass-action law {name!r} already registered")
        _CATALOG[name] = factory
        return factory

    return deco


def make_law(name, **params) -> MassActionLaw:
    try:
        factory = _CATALOG[name]
    except KeyError:
        raise ModelArgumentError(
            f"unknown mass-action law {name!r}; known: {sorted(_CATALOG)}"
        ) from None
    return factory(**params)


def registered_laws():
    return sorted(_CATALOG)


def _falling(x, k):
    out = 1.0
    for j in range(k):
        out *= x - j
    return out


@register_law("mass_action")
def _mass_action_law(reactants, scale=1.0):
    reactants = [int(r) for r in reactants]

    def h(t, X):
        out = scale
        for x, k in zip(X, reactants):
            out *= _falling(float(x), k) if x >= k else 0.0
        return out

    return MassActionLaw("mass_action", h, params={"reactants": reactants, "scale": scale})


@register_law("constant")
def _constant_law(value=1.0):
    value = float(value)
    return MassActionLaw(
        "constant",
        lambda t, X: value,
        params={"value": value},
        batch=lambda Xs: np.full(len(Xs), value),
    )


@register_law("linear")
def _linear_law(species=0):
    return MassActionLaw(
        "linear",
        lambda t, X: float(X[species]),
        params={"species": species},
        batch=lambda Xs: np.asarray(Xs, dtype=float)[:, species],
    )


@register_law("sis_infection")
def _sis_infection_law(N, eta, species=0):
    N = float(N)
    eta = float(eta)

    def h(t, X):
        I = float(X[species])
        return (I + eta) * (N - I) / N

    def batch(Xs):
        I = np.asarray(Xs, dtype=float)[:, species]
        return (I + eta) * (N - I) / N

    return MassActionLaw("sis_infection", h, params={"N": N, "eta": eta, "species": species}, batch=batch)


@register_law("sis_recovery")
def _sis_recovery_law(species=0):
    law = _linear_law(species)
    return replace(law, name="sis_recovery")


@register_law("periodic")
def _periodic_law(base, amplitude=0.5, period=365.0, species=0):
    """``base(X) * (1 + amplitude * sin(2 pi t / period))``; time dependent."""
    inner = make_law(**base) if isinstance(base, Mapping) else base
    amplitude = float(amplitude)

    def h(t, X):
        return inner(t, X) * (1.0 + amplitude * math.sin(2.0 * math.pi * t / period))

    return MassActionLaw(
        "periodic", h, time_dependent=True,
        params={"base": base, "amplitude": amplitude, "period": period},
    )


# ---------------------------------------------------------------------------
# rate parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RateTies:
    """Linear ties mapping each ``(q, i)`` onto a free parameter.

    ``theta_q(i) = coef[q, i] * free[index[q, i]]``.
    """

    index: np.ndarray
    coef: np.ndarray

    def __post_init__(self):
        index = np.asarray(self.index, dtype=np.int64)
        coef = np.asarray(self.coef, dtype=float)
        if index.ndim != 2 or index.shape != coef.shape:
            raise ModelArgumentError("tie index and coefficients must be matching qbar x mbar arrays")
        if np.any(coef <= 0):
            raise ModelArgumentError("tie coefficients must be positive")
        n = index.max() + 1
        if index.min() < 0 or set(np.unique(index)) != set(range(n)):
            raise ModelArgumentError("tie indices must cover 0..P-1")
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "coef", coef)

    @classmethod
    def untied(cls, qbar, mbar):
        return cls(np.arange(qbar * mbar).reshape(qbar, mbar), np.ones((qbar, mbar)))

    @property
    def qbar(self):
        return self.index.shape[0]

    @property
    def mbar(self):
        return self.index.shape[1]

    @property
    def n_free(self):
        return int(self.index.max()) + 1

    def expand(self, free):
        """Map free values (shape ``(..., P)``) to ``(..., qbar, mbar)``."""
        free = np.asarray(free, dtype=float)
        return self.coef * free[..., self.index]

    def __eq__(self, other):
        return (
            isinstance(other, RateTies)
            and np.array_equal(self.index, other.index)
            and np.array_equal(self.coef, other.coef)
        )

    def to_dict(self):
        return {"index": self.index.tolist(), "coef": self.coef.tolist()}


@dataclass(frozen=True, eq=False)
class RateParams:
    """Positive rates ``theta_q(i)`` stored as free values plus ties."""

    values: np.ndarray
    ties: RateTies

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.shape[0] != self.ties.n_free:
            raise ModelArgumentError("number of free rate values does not match the ties")
        if not np.all(values > 0):
            raise ModelArgumentError("rate parameters must be positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "matrix", self.ties.expand(values))

    @classmethod
    def from_matrix(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(theta.reshape(-1), RateTies.untied(*theta.shape))

    def theta(self, q, i):
        return float(self.matrix[q - 1, i - 1])

    def scaled(self, factor):
        return RateParams(self.values * factor, self.ties)


# ---------------------------------------------------------------------------
# systems, regimes, states, paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReactionSystem:
    """Stoichiometry, mass-action laws and regime-modulated rates.

    ``rate_bound(X, i)`` must bound the total rate for all future times
    while the state is ``X``; simulation of time-dependent laws needs it.
    """

    deltas: np.ndarray
    laws: tuple
    rate_params: RateParams
    species: tuple = ()
    reactions: tuple = ()
    rate_bound: Callable | None = None

    def __post_init__(self):
        deltas = np.atleast_2d(np.asarray(self.deltas, dtype=np.int64))
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "laws", tuple(self.laws))
        if len(self.laws) != deltas.shape[0]:
            raise ModelArgumentError("need exactly one mass-action law per reaction type")
        if self.rate_params.ties.qbar != deltas.shape[0]:
            raise ModelArgumentError("rate table must have one row per reaction type")
        if not self.species:
            object.__setattr__(self, "species", tuple(f"X{k + 1}" for k in range(self.d)))
        if not self.reactions:
            object.__setattr__(self, "reactions", tuple(f"R{q + 1}" for q in range(self.qbar)))

    @property
    def d(self):
        return self.deltas.shape[1]

    @property
    def qbar(self):
        return self.deltas.shape[0]

    @property
    def mbar(self):
        return self.rate_params.ties.mbar

    @property
    def ties(self):
        return self.rate_params.ties

    @property
    def time_dependent(self):
        return any(law.time_dependent for law in self.laws)

    def with_rates(self, rate_params):
        if rate_params.ties.qbar != self.qbar or rate_params.ties.mbar != self.mbar:
            raise ModelArgumentError("rate table shape mismatch")
        return replace(self, rate_params=rate_params)

    def check_reaction(self, q):
        if not 1 <= q <= self.qbar:
            raise ModelArgumentError(f"reaction index {q} outside 1..{self.qbar}")

    def check_regime(self, i):
        if not 1 <= i <= self.mbar:
            raise ModelArgumentError(f"regime index {i} outside 1..{self.mbar}")

    def h(self, q, t, X):
        """Mass-action factor of reaction ``q``; zero if it would empty a species."""
        X = np.asarray(X)
        if np.any(X + self.deltas[q - 1] < 0):
            return 0.0
        value = float(self.laws[q - 1](t, X))
        if value < 0:
            raise ModelArgumentError(f"mass-action law {self.laws[q - 1].name} returned {value} < 0")
        return value

    def h_vector(self, t, X):
        return np.array([self.h(q, t, X) for q in range(1, self.qbar + 1)])

    def h_batch(self, states):
        """``h_q(X)`` for a stack of states, shape ``(n, qbar)``; time-homogeneous laws only."""
        states = np.asarray(states, dtype=np.int64)
        out = np.empty((len(states), self.qbar))
        for q, law in enumerate(self.laws):
            if law.batch is not None:
                out[:, q] = law.batch(states)
            else:
                out[:, q] = [law(0.0, x) for x in states]
        feasible = np.all(states[:, None, :] + self.deltas[None, :, :] >= 0, axis=2)
        return np.where(feasible, out, 0.0)


def check_generator(G, tol=1e-9):
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ModelArgumentError("generator must be a square matrix")
    off = G - np.diag(np.diag(G))
    if np.any(off < 0):
        raise ModelArgumentError("generator off-diagonal entries must be nonnegative")
    if np.any(np.abs(G.sum(axis=1)) > tol * max(1.0, np.abs(G).max())):
        raise ModelArgumentError("generator rows must sum to zero")
    return G


@dataclass(frozen=True, eq=False)
class RegimeModel:
    """Finite-state generator ``G_M(t, X)`` of the modulating chain."""

    mbar: int
    generator: Callable[[float, np.ndarray], np.ndarray]
    time_dependent: bool = False
    state_dependent: bool = False
    leave_rate_bound: float | None = None

    @classmethod
    def constant(cls, G):
        G = check_generator(G)
        G.setflags(write=False)
        return cls(G.shape[0], lambda t, X: G)

    def G(self, t=0.0, X=None):
        G = np.asarray(self.generator(t, X), dtype=float)
        if G.shape != (self.mbar, self.mbar):
            raise ModelArgumentError("generator has the wrong shape")
        return G

    def stationary(self, t=0.0, X=None):
        G = self.G(t, X)
        A = np.vstack([G.T, np.ones(self.mbar)])
        rhs = np.zeros(self.mbar + 1)
        rhs[-1] = 1.0
        return np.linalg.lstsq(A, rhs, rcond=None)[0]


@dataclass(frozen=True, eq=False)
class SystemState:
    t: float
    X: np.ndarray
    M: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.int64).reshape(-1)
        if np.any(X < 0):
            raise ModelArgumentError("species counts must be nonnegative")
        if self.M < 1:
            raise ModelArgumentError("regimes are numbered from 1")
        object.__setattr__(self, "X", X)


@dataclass(frozen=True, eq=False)
class EventPath:
    """Marked point process ``(tau_k, R_k)`` on ``[t0, t_end]``.

    ``regime_times``/``regimes`` hold the switches of the modulating chain
    and are present only for fully observed paths.
    """

    t0: float
    X0: np.ndarray
    M0: int
    times: np.ndarray
    reactions: np.ndarray
    t_end: float
    regime_times: np.ndarray | None = None
    regimes: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "X0", np.asarray(self.X0, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float).reshape(-1))
        object.__setattr__(self, "reactions", np.asarray(self.reactions, dtype=np.int64).reshape(-1))
        if len(self.times) != len(self.reactions):
            raise ModelArgumentError("event times and reaction types differ in length")
        if (self.regime_times is None) != (self.regimes is None):
            raise ModelArgumentError("regime times and regimes must be given together")
        if self.regime_times is not None:
            object.__setattr__(self, "regime_times", np.asarray(self.regime_times, dtype=float).reshape(-1))
            object.__setattr__(self, "regimes", np.asarray(self.regimes, dtype=np.int64).reshape(-1))
        if np.any(np.diff(self.times) <= 0) or (self.has_regime_path and np.any(np.diff(self.regime_times) <= 0)):
            raise ModelArgumentError("event and regime-switch times must be strictly increasing")
        if len(self.times) and (self.times[0] <= self.t0 or self.times[-1] > self.t_end):
            raise ModelArgumentError("events must lie in (t0, t_end]")

    @property
    def has_regime_path(self):
        return self.regime_times is not None

    @property
    def n_events(self):
        return len(self.times)

    @property
    def n_transitions(self):
        return self.n_events + (len(self.regime_times) if self.has_regime_path else 0)

    def states(self, deltas):
        """Species counts after each event; row 0 is ``X0``. Shape ``(n+1, d)``."""
        deltas = np.atleast_2d(deltas)
        steps = deltas[self.reactions - 1] if self.n_events else np.zeros((0, len(self.X0)), dtype=np.int64)
        return self.X0 + np.vstack([np.zeros((1, len(self.X0)), dtype=np.int64), np.cumsum(steps, axis=0)])

    def regime_at(self, t):
        if not self.has_regime_path:
            raise PreconditionError("path has no regime record")
        k = np.searchsorted(self.regime_times, t, side="right")
        return int(self.M0 if k == 0 else self.regimes[k - 1])

    def hidden(self):
        """The same path with the regime record removed."""
        return replace(self, regime_times=None, regimes=None)

    def validate(self, sys: ReactionSystem):
        if np.any(self.reactions < 1) or np.any(self.reactions > sys.qbar):
            raise ModelArgumentError("reaction index out of range")
        if np.any(self.states(sys.deltas) < 0):
            raise ModelArgumentError("replaying the events drives a species negative")
        if self.has_regime_path and (np.any(self.regimes < 1) or np.any(self.regimes > sys.mbar)):
            raise ModelArgumentError("regime index out of range")
        return self

    def window(self, deltas, start, stop):
        """Sub-path on ``[start, stop]`` with the initial condition at ``start``."""
        if not self.t0 <= start <= stop <= self.t_end:
            raise PreconditionError("window must lie inside the path")
        X = self.states(deltas)
        k0 = np.searchsorted(self.times, start, side="right")
        k1 = np.searchsorted(self.times, stop, side="right")
        kw = {}
        M = self.M0
        if self.has_regime_path:
            M = self.regime_at(start)
            r0 = np.searchsorted(self.regime_times, start, side="right")
            r1 = np.searchsorted(self.regime_times, stop, side="right")
            kw = dict(regime_times=self.regime_times[r0:r1], regimes=self.regimes[r0:r1])
        return EventPath(start, X[k0], M, self.times[k0:k1], self.reactions[k0:k1], stop, **kw)

    def truncate(self, deltas, stop):
        return self.window(deltas, self.t0, stop)


def iter_segments(sys: ReactionSystem, path: EventPath) -> Iterator[tuple]:
    """Yield ``(start, stop, X, M, reaction)`` constancy intervals of a full path.

    ``reaction`` is the 1-based type of the event ending the interval, or
    ``None`` when the interval ends with a regime switch or the horizon.
    A regime switch at the same instant as an event is applied first.
    """
    if not path.has_regime_path:
        raise PreconditionError("segment iteration needs the regime path")
    X = path.X0.copy()
    M = path.M0
    t = path.t0
    ev, rg = 0, 0
    n_ev, n_rg = path.n_events, len(path.regime_times)
    while ev < n_ev or rg < n_rg:
        if rg < n_rg and (ev >= n_ev or path.regime_times[rg] <= path.times[ev]):
            s = float(path.regime_times[rg])
            yield t, s, X, M, None
            M = int(path.regimes[rg])
            rg += 1
        else:
            s = float(path.times[ev])
            q = int(path.reactions[ev])
            yield t, s, X, M, q
            X = X + sys.deltas[q - 1]
            ev += 1
        t = s
    yield t, path.t_end, X, M, None


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def propensity(sys: ReactionSystem, q, t, X, i):
    """``alpha_q(t, X, i) = theta_q(i) * h_q(t, X)``."""
    sys.check_reaction(q)
    sys.check_regime(i)
    return sys.rate_params.theta(q, i) * sys.h(q, t, X)


def propensities(sys: ReactionSystem, t, X, i):
    sys.check_regime(i)
    return sys.rate_params.matrix[:, i - 1] * sys.h_vector(t, X)


def total_rate(sys: ReactionSystem, t, X, i):
    return float(propensities(sys, t, X, i).sum())


def reaction_type_likelihood(sys: ReactionSystem, q, t, X, i):
    """Probability that the next reaction is of type ``q``."""
    sys.check_reaction(q)
    alpha = propensities(sys, t, X, i)
    total = alpha.sum()
    if total <= 0:
        raise DegenerateStateError(f"total rate is zero at X={np.asarray(X).tolist()}, regime {i}")
    return float(alpha[q - 1] / total)


def integrated_h(sys: ReactionSystem, q, start, stop, X):
    """``int_start^stop h_q(s, X) ds`` with ``X`` held fixed."""
    if stop <= start:
        return 0.0
    law = sys.laws[q - 1]
    if not law.time_dependent:
        return sys.h(q, start, X) * (stop - start)
    value, _ = integrate.quad(lambda s: sys.h(q, s, X), start, stop, epsabs=QUAD_ABS_TOL, limit=200)
    return value


def path_log_likelihood(sys: ReactionSystem, path: EventPath):
    """Log density of the observed events given the regime path.

    Returns :data:`LOG_ZERO` when an observed reaction has zero propensity.
    """
    if not path.has_regime_path:
        raise PreconditionError("path_log_likelihood needs the regime path")
    theta = sys.rate_params.matrix
    survival = []
    events = []
    for start, stop, X, M, q in iter_segments(sys, path):
        survival.extend(theta[k, M - 1] * integrated_h(sys, k + 1, start, stop, X) for k in range(sys.qbar))
        if q is not None:
            a = theta[q - 1, M - 1] * sys.h(q, stop, X)
            if a <= 0:
                return LOG_ZERO
            events.append(math.log(a))
    return -math.fsum(survival) + math.fsum(events)


def event_counts(path: EventPath, qbar, mbar):
    """``N^{q,i}``: counts of type-q events that occurred in regime i."""
    counts = np.zeros((qbar, mbar), dtype=np.int64)
    if path.has_regime_path:
        k = np.searchsorted(path.regime_times, path.times, side="right")
        regs = np.where(k == 0, path.M0, path.regimes[np.maximum(k - 1, 0)])
    else:
        regs = np.full(path.n_events, path.M0)
    np.add.at(counts, (path.reactions - 1, regs - 1), 1)
    return counts


def path_arrays(sys: ReactionSystem, regime_model: RegimeModel, path: EventPath, include_tail=False):
    """Per-interval inputs for the filters.

    Returns ``gaps`` (n,), 0-based ``reactions`` (n,), ``H`` (n, qbar) with
    the mass-action factors in force before each event, ``G`` (n, m, m)
    and interval ``ends`` (n,). With ``include_tail`` a last interval up to
    ``t_end`` is appended with reaction ``-1``.
    """
    if sys.time_dependent or regime_model.time_dependent:
        raise NotImplementedError("filters support time-homogeneous laws and generators only")
    states = path.states(sys.deltas)
    ends = path.times.copy()
    reactions = path.reactions - 1
    if include_tail:
        ends = np.append(ends, path.t_end)
        reactions = np.append(reactions, -1)
    else:
        states = states[:-1]
    H = sys.h_batch(states)
    if regime_model.state_dependent:
        G = np.stack([regime_model.G(0.0, x) for x in states]) if len(states) else np.zeros((0, sys.mbar, sys.mbar))
    else:
        G = np.broadcast_to(regime_model.G(0.0, path.X0), (len(states), sys.mbar, sys.mbar))
    gaps = np.diff(np.concatenate([[path.t0], ends]))
    return gaps, reactions.astype(np.int64), H, np.ascontiguousarray(G), ends
