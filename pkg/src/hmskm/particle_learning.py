"""Sequential Monte Carlo for the joint posterior of regime and rates.

Particle learning (resample-move on regime plus sufficient statistics) is
the main filter; the Storvik propagate-resample filter and the Liu-West
kernel-shrinkage filter are provided as baselines. Heavy loops live in
:mod:`hmskm._kernels`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels as K
from .conjugate import SufficientStats
from .errors import FilterCollapseError, ModelArgumentError, PreconditionError
from .kinetics import EventPath, RateParams, RateTies, ReactionSystem, RegimeModel, path_arrays

REJECTION_CAP = 10_000
TRIGGERS = ("every", "ess")


def _scheme_code(scheme):
    try:
        return K.SCHEMES[scheme]
    except KeyError:
        raise ModelArgumentError(f"unknown resampling scheme {scheme!r}; use one of {sorted(K.SCHEMES)}") from None


@dataclass(frozen=True)
class LWConfig:
    h: float = 0.97

    def __post_init__(self):
        if not 0 < self.h < 1:
            raise ModelArgumentError("bandwidth h must lie in (0, 1)")

    @property
    def shrinkage(self):
        return math.sqrt(1.0 - self.h**2)


@dataclass(eq=False)
class ParticleCloud:
    """Weighted particles ``(m, stats)`` or, for Liu-West, ``(m, log theta)``.

    ``m`` is 0-based internally; :attr:`regimes` gives 1-based labels.
    Steps update the cloud in place and also return it.
    """

    m: np.ndarray
    logw: np.ndarray
    ties: RateTies
    rng: np.random.Generator
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    log_theta: np.ndarray | None = None
    scheme: str = "residual"
    trigger: str = "every"
    ess_threshold: float = 0.5
    counters: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def __post_init__(self):
        _scheme_code(self.scheme)
        if self.trigger not in TRIGGERS:
            raise ModelArgumentError(f"trigger must be one of {TRIGGERS}")
        if len(self.m) < 1:
            raise ModelArgumentError("a cloud needs at least one particle")

    @property
    def J(self):
        return len(self.m)

    @property
    def regimes(self):
        return self.m + 1

    @property
    def has_stats(self):
        return self.a is not None

    def weights(self):
        w = np.empty(self.J)
        if K.normalize_logw(self.logw, w) < 0:
            raise FilterCollapseError("all particle weights are zero")
        return w

    def copy(self):
        cp = lambda x: None if x is None else x.copy()
        return ParticleCloud(self.m.copy(), self.logw.copy(), self.ties, self.rng, cp(self.a), cp(self.b),
                             cp(self.log_theta), self.scheme, self.trigger, self.ess_threshold, self.counters.copy())

    def _kernel_flags(self):
        return _scheme_code(self.scheme), self.trigger == "every", float(self.ess_threshold)

    @property
    def acceptance_rate(self):
        return self.counters[1] / self.counters[0] if self.counters[0] else float("nan")


def _initial_regimes(J, pi0, m0, rng, mbar):
    if m0 is not None:
        return np.full(J, int(m0) - 1, dtype=np.int64)
    pi0 = np.asarray(pi0, dtype=float)
    if len(pi0) != mbar:
        raise ModelArgumentError("initial belief has the wrong length")
    return rng.choice(mbar, size=J, p=pi0 / pi0.sum()).astype(np.int64)


def init_cloud(prior: SufficientStats, J, rng, m0=None, pi0=None, scheme="residual", trigger="every",
               ess_threshold=0.5) -> ParticleCloud:
    """Cloud of ``J`` particles with prior statistics; regimes from ``m0`` or ``pi0``."""
    m = _initial_regimes(J, pi0, m0, rng, prior.ties.mbar)
    return ParticleCloud(m, np.zeros(J), prior.ties, rng, np.tile(prior.a, (J, 1)), np.tile(prior.b, (J, 1)),
                         scheme=scheme, trigger=trigger, ess_threshold=ess_threshold)


def init_lw_cloud(prior: SufficientStats, J, rng, m0=None, pi0=None, scheme="residual", trigger="every",
                  ess_threshold=0.5) -> ParticleCloud:
    """Cloud with explicit parameter copies drawn from the prior."""
    m = _initial_regimes(J, pi0, m0, rng, prior.ties.mbar)
    theta = rng.gamma(np.tile(prior.a, (J, 1)), 1.0 / np.tile(prior.b, (J, 1)))
    return ParticleCloud(m, np.zeros(J), prior.ties, rng, log_theta=np.log(theta), scheme=scheme,
                         trigger=trigger, ess_threshold=ess_threshold)


def point_mass_prior(theta: RateParams, concentration=1e12) -> SufficientStats:
    """Gamma prior concentrated at known rates."""
    return SufficientStats.prior(theta.ties, theta.values * concentration, concentration)


# ---------------------------------------------------------------------------
# single-interval operations
# ---------------------------------------------------------------------------

def _rates_for(sys, theta, q, X_pre, t=0.0):
    if theta is None:
        theta = sys.rate_params
    matrix = theta.matrix if isinstance(theta, RateParams) else np.asarray(theta, dtype=float)
    h = sys.h_vector(t, X_pre)
    abar = matrix.T @ h
    alpha_r = matrix[q - 1] * h[q - 1]
    return abar, alpha_r


def predictive_likelihood(sys: ReactionSystem, regime_model: RegimeModel, m_prev, theta, gap, q, X_pre, t=0.0):
    """Density of the next event arriving after ``gap`` with type ``q``.

    Returns ``(value, per_regime)`` where ``per_regime[i]`` is the part of
    the density with the chain in regime ``i + 1`` at the event.
    """
    if gap < 0:
        raise ModelArgumentError("gap must be nonnegative")
    sys.check_reaction(q)
    abar, alpha_r = _rates_for(sys, theta, q, X_pre, t)
    G = regime_model.G(t, X_pre)
    if sys.mbar == 2:
        P = K.killed2(G[0, 0] - abar[0], G[0, 1], G[1, 0], G[1, 1] - abar[1], float(gap), np.empty((2, 2)))
    else:
        P = K.killed_matrix(np.ascontiguousarray(G), abar, float(gap))
    parts = P[m_prev - 1] * alpha_r
    return float(parts.sum()), parts


@dataclass(frozen=True)
class RegimeBridge:
    """Regime path on ``(0, gap]`` relative to the previous event."""

    switch_times: np.ndarray
    switch_regimes: np.ndarray
    end: int
    occupation: np.ndarray
    proposals: int
    fallback: bool


def sample_conditional_regime_path(regime_model: RegimeModel, sys: ReactionSystem, m_start, theta, gap, q, X_pre,
                                   rng, cap=REJECTION_CAP, t=0.0, record=4096) -> RegimeBridge:
    """Draw the regime path between two events given the second one.

    Rejection sampling from the unconditional chain; if ``cap`` proposals
    are all rejected an exact uniformization bridge is drawn instead.
    """
    if not gap > 0:
        raise PreconditionError("gap must be positive")
    abar, alpha_r = _rates_for(sys, theta, q, X_pre, t)
    if not alpha_r.max() > 0:
        raise PreconditionError(f"reaction {q} is impossible in every regime")
    G = np.ascontiguousarray(regime_model.G(t, X_pre))
    occ = np.empty(sys.mbar)
    sw_t = np.empty(record)
    sw_s = np.empty(record, dtype=np.int64)
    counters = np.zeros(3, dtype=np.int64)
    end, nsw = K.conditional_path(m_start - 1, G, abar, alpha_r, float(gap), rng, cap, occ, sw_t, sw_s, counters)
    if nsw > record:
        raise RuntimeError("regime path has more switches than the record buffer")
    return RegimeBridge(sw_t[:nsw].copy(), sw_s[:nsw] + 1, int(end) + 1, occ.copy(),
                        int(counters[0]), bool(counters[2]))


def path_bound_ratio(abar, alpha_r, occupation, end, gap):
    """Proposal path likelihood over its bound; at most one for a valid bound."""
    value = math.exp(-float(np.dot(occupation, abar))) * alpha_r[end - 1]
    bound = math.exp(-gap * float(np.min(abar))) * float(np.max(alpha_r))
    return value, bound


def ess(cloud: ParticleCloud):
    w = cloud.weights()
    return 1.0 / float(np.sum(w * w))


def resample(cloud: ParticleCloud, scheme=None, rng=None) -> ParticleCloud:
    """Resample in place; weights become uniform."""
    rng = cloud.rng if rng is None else rng
    code = _scheme_code(scheme or cloud.scheme)
    anc = K.resample_indices(cloud.weights(), cloud.J, code, rng)
    cloud.m = cloud.m[anc]
    for name in ("a", "b", "log_theta"):
        arr = getattr(cloud, name)
        if arr is not None:
            setattr(cloud, name, arr[anc])
    cloud.logw = np.zeros(cloud.J)
    return cloud


def offspring_counts(w, scheme, rng, n_out=None):
    n_out = len(w) if n_out is None else n_out
    anc = K.resample_indices(np.asarray(w, dtype=float), n_out, _scheme_code(scheme), rng)
    return np.bincount(anc, minlength=len(w))


def _interval_inputs(sys, regime_model, t_prev, t_event, q, X_pre):
    if sys.time_dependent or regime_model.time_dependent:
        raise NotImplementedError("particle filters support time-homogeneous models only")
    gap = t_event - t_prev
    if not gap > 0:
        raise PreconditionError("events must be strictly after the previous event")
    sys.check_reaction(q)
    H = sys.h_vector(t_prev, X_pre)
    G = np.ascontiguousarray(regime_model.G(t_prev, X_pre))
    return float(gap), int(q - 1), H, G


def _collapse(k, t):
    return FilterCollapseError(f"all particle weights are zero at event {k} (t={t})", event_index=k, time=t)


def pl_step(cloud: ParticleCloud, sys, regime_model, t_prev, t_event, q, X_pre) -> ParticleCloud:
    """One particle-learning update for the event ``(t_event, q)``."""
    if not cloud.has_stats:
        raise PreconditionError("particle learning needs sufficient statistics")
    gap, r, H, G = _interval_inputs(sys, regime_model, t_prev, t_event, q, X_pre)
    scheme, always, frac = cloud._kernel_flags()
    st = K.pl_step(cloud.m, cloud.a, cloud.b, cloud.logw, gap, r, H, G, cloud.ties.index, cloud.ties.coef,
                   cloud.rng, scheme, always, frac, REJECTION_CAP, cloud.counters)
    if st:
        raise _collapse(None, t_event)
    return cloud


def storvik_step(cloud: ParticleCloud, sys, regime_model, t_prev, t_event, q, X_pre) -> ParticleCloud:
    if not cloud.has_stats:
        raise PreconditionError("the Storvik filter needs sufficient statistics")
    gap, r, H, G = _interval_inputs(sys, regime_model, t_prev, t_event, q, X_pre)
    scheme, always, frac = cloud._kernel_flags()
    st = K.storvik_step(cloud.m, cloud.a, cloud.b, cloud.logw, gap, r, H, G, cloud.ties.index, cloud.ties.coef,
                        cloud.rng, scheme, always, frac)
    if st:
        raise _collapse(None, t_event)
    return cloud


def liu_west_step(cloud: ParticleCloud, sys, regime_model, t_prev, t_event, q, X_pre, lw=LWConfig(),
                  move=True) -> ParticleCloud:
    if cloud.log_theta is None:
        raise PreconditionError("the Liu-West filter needs explicit parameter copies")
    gap, r, H, G = _interval_inputs(sys, regime_model, t_prev, t_event, q, X_pre)
    scheme, always, frac = cloud._kernel_flags()
    st = K.lw_step(cloud.m, cloud.log_theta, cloud.logw, gap, r, H, G, cloud.ties.index, cloud.ties.coef,
                   cloud.rng, scheme, always, frac, lw.h, move)
    if st:
        raise _collapse(None, t_event)
    return cloud


def shrinkage_move(cloud: ParticleCloud, lw=LWConfig()) -> ParticleCloud:
    """Apply only the kernel-shrinkage jitter to the parameter copies."""
    K.shrink_move(cloud.log_theta, cloud.logw, lw.h, cloud.rng)
    return cloud


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def mixture_gamma_cdf(x, a, b, w):
    return float(np.dot(w, special.gammainc(a, b * x)))


def mixture_gamma_quantile(p, a, b, w, tol=1e-8):
    """Quantile of ``sum_j w_j Gamma(a_j, b_j)`` by bisection.

    Identical components are merged first.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    keys = np.stack([a, b], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    wu = np.bincount(inv, weights=w, minlength=len(uniq))
    wu = wu / wu.sum()
    au, bu = uniq[:, 0], uniq[:, 1]
    if len(au) == 1:
        return float(special.gammaincinv(au[0], p) / bu[0])
    comp = special.gammaincinv(au, p) / bu
    lo, hi = float(comp.min()), float(comp.max())
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if float(np.dot(wu, special.gammainc(au, bu * mid))) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def weighted_quantile(values, w, p):
    order = np.argsort(values)
    cw = np.cumsum(np.asarray(w)[order])
    k = np.searchsorted(cw, p * cw[-1], side="left")
    return float(np.asarray(values)[order][min(k, len(cw) - 1)])


@dataclass(frozen=True)
class CloudSummary:
    pi: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray


def cloud_posterior_summary(cloud: ParticleCloud, level=0.95) -> CloudSummary:
    """Regime belief and per-cell rate mean/median/interval.

    Statistics clouds summarize the Gamma mixture; Liu-West clouds use
    weighted empirical quantiles of their parameter copies.
    """
    w = cloud.weights()
    mbar = cloud.ties.mbar
    pi = np.bincount(cloud.m, weights=w, minlength=mbar)
    lo_p = (1.0 - level) / 2.0
    shape = cloud.ties.index.shape
    out = {k: np.empty(shape) for k in ("mean", "lower", "median", "upper")}
    for q in range(shape[0]):
        for i in range(shape[1]):
            p, c = cloud.ties.index[q, i], cloud.ties.coef[q, i]
            if cloud.has_stats:
                a, b = cloud.a[:, p], cloud.b[:, p] / c
                out["mean"][q, i] = float(np.dot(w, a / b))
                qs = [mixture_gamma_quantile(x, a, b, w) for x in (lo_p, 0.5, 1.0 - lo_p)]
            else:
                vals = c * np.exp(cloud.log_theta[:, p])
                out["mean"][q, i] = float(np.dot(w, vals))
                qs = [weighted_quantile(vals, w, x) for x in (lo_p, 0.5, 1.0 - lo_p)]
            out["lower"][q, i], out["median"][q, i], out["upper"][q, i] = qs
    return CloudSummary(pi, **out)


# ---------------------------------------------------------------------------
# whole-path runs
# ---------------------------------------------------------------------------

ALGORITHMS = ("pl", "storvik", "lw")


@dataclass
class FilterRun:
    """Output of a whole-path particle filter run.

    ``pi_hat[k]`` is the regime belief right after event ``k``;
    ``snapshots`` maps each requested time to the cloud at that time.
    """

    algorithm: str
    event_times: np.ndarray
    pi_hat: np.ndarray
    snapshots: dict
    counters: np.ndarray
    J: int

    @property
    def acceptance_rate(self):
        return self.counters[1] / self.counters[0] if self.counters[0] else float("nan")

    def pi_at(self, t, pi0):
        k = np.searchsorted(self.event_times, t, side="right")
        return np.asarray(pi0, dtype=float) if k == 0 else self.pi_hat[k - 1]


def run_particle_filter(sys: ReactionSystem, regime_model: RegimeModel, path: EventPath, prior: SufficientStats,
                        J, algorithm="pl", seed=None, rng=None, scheme="residual", trigger="every",
                        ess_threshold=0.5, m0=None, pi0=None, snapshot_times=(), lw=LWConfig(),
                        lw_move=True) -> FilterRun:
    """Run one of ``pl``, ``storvik`` or ``lw`` over all events of ``path``.

    A snapshot at time ``t`` is the cloud after every event at or before ``t``.
    """
    if algorithm not in ALGORITHMS:
        raise ModelArgumentError(f"algorithm must be one of {ALGORITHMS}")
    if J < 1:
        raise ModelArgumentError("J must be at least 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    if m0 is None and pi0 is None:
        m0 = path.M0
    gaps, rs, H, G, ends = path_arrays(sys, regime_model, path)
    snapshot_times = np.asarray(sorted(snapshot_times), dtype=float)
    snap_at = np.searchsorted(ends, snapshot_times, side="right").astype(np.int64)
    nsnap = len(snap_at)
    pi_out = np.zeros((len(gaps), sys.mbar))
    init = init_lw_cloud if algorithm == "lw" else init_cloud
    cloud = init(prior, J, rng, m0=m0, pi0=pi0, scheme=scheme, trigger=trigger, ess_threshold=ess_threshold)
    code, always, frac = cloud._kernel_flags()
    idx, coef = prior.ties.index, prior.ties.coef
    P = prior.ties.n_free
    snap_m = np.zeros((nsnap, J), dtype=np.int64)
    snap_w = np.zeros((nsnap, J))
    if algorithm == "lw":
        snap_lt = np.zeros((nsnap, J, P))
        status = K.run_lw_filter(cloud.m, cloud.log_theta, cloud.logw, gaps, rs, H, G, idx, coef, rng, code,
                                 always, frac, lw.h, lw_move, snap_at, snap_m, snap_lt, snap_w, pi_out)
    else:
        snap_a = np.zeros((nsnap, J, P))
        snap_b = np.zeros((nsnap, J, P))
        status = K.run_stats_filter(0 if algorithm == "pl" else 1, cloud.m, cloud.a, cloud.b, cloud.logw,
                                    gaps, rs, H, G, idx, coef, rng, code, always, frac, REJECTION_CAP,
                                    snap_at, snap_m, snap_a, snap_b, snap_w, pi_out, cloud.counters)
    if status >= 0:
        raise _collapse(int(status), float(ends[status]))
    snapshots = {}
    for s, t in enumerate(snapshot_times):
        kw = dict(log_theta=snap_lt[s]) if algorithm == "lw" else dict(a=snap_a[s], b=snap_b[s])
        snapshots[float(t)] = ParticleCloud(snap_m[s], snap_w[s], prior.ties, rng, scheme=scheme,
                                            trigger=trigger, ess_threshold=ess_threshold, **kw)
    return FilterRun(algorithm, ends, pi_out, snapshots, cloud.counters.copy(), J)
