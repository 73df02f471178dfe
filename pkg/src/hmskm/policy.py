"""Controlled SIS scenarios: countermeasure rules, costs and Monte Carlo
evaluation.

A countermeasure ``phi`` switches the season generator between ``G0`` and
``G1``. Rules only act at reaction events. The Bayesian rule reads the
high-season belief from an online particle-learning filter (or the exact
filter with rates fixed, in the cheap mode).
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _kernels as K
from .errors import ConfigurationError, ModelArgumentError
from .kinetics import check_generator
from .sis import SISParams

BASELINE, ORACLE, INFECTEDS, BAYESIAN = 0, 1, 2, 3
VARIANTS = {"baseline": BASELINE, "oracle": ORACLE, "infecteds": INFECTEDS, "bayesian": BAYESIAN}
DAYS_PER_YEAR = 365.0


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyRule:
    """Hysteresis rule with start region ``upper`` and stop region ``lower``.

    For ``infecteds`` the thresholds apply to ``I - ewma``; for ``bayesian``
    to the high-season belief. Stopping also needs ``I < I_high``.
    """

    variant: str
    upper: float = math.nan
    lower: float = math.nan
    kappa: float = 1.0 / 14.0
    I_high: float = 200.0
    name: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelArgumentError(f"unknown rule variant {self.variant!r}")
        if self.variant in ("infecteds", "bayesian") and not self.lower < self.upper:
            raise ModelArgumentError("need lower < upper")
        if self.kappa <= 0:
            raise ModelArgumentError("kappa must be positive")
        if not self.name:
            label = self.variant.capitalize()
            if self.variant in ("infecteds", "bayesian"):
                label += f"({self.upper:g},{self.lower:g})"
            object.__setattr__(self, "name", label)

    @classmethod
    def baseline(cls):
        return cls("baseline")

    @classmethod
    def oracle(cls):
        return cls("oracle")

    @classmethod
    def infecteds(cls, upper, lower, kappa=1.0 / 14.0, I_high=200.0):
        return cls("infecteds", upper, lower, kappa, I_high)

    @classmethod
    def bayesian(cls, upper, lower, I_high=200.0):
        return cls("bayesian", upper, lower, I_high=I_high)

    @property
    def code(self):
        return VARIANTS[self.variant]

    def to_dict(self):
        d = {"variant": self.variant}
        if self.variant in ("infecteds", "bayesian"):
            d.update(upper=self.upper, lower=self.lower, I_high=self.I_high)
        if self.variant == "infecteds":
            d["kappa"] = self.kappa
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "variant" not in d:
            raise ConfigurationError("rule needs a 'variant'")
        return cls(**d)


def table3_rules():
    return [
        PolicyRule.baseline(),
        PolicyRule.oracle(),
        PolicyRule.infecteds(20, -10),
        PolicyRule.infecteds(40, -20),
        PolicyRule.bayesian(0.80, 0.01),
        PolicyRule.bayesian(0.95, 0.05),
    ]


@dataclass(frozen=True, eq=False)
class ControlledRegimeModel:
    """Season generators without (``G0``) and with (``G1``) countermeasures, per day."""

    G0: np.ndarray
    G1: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G0", check_generator(self.G0))
        object.__setattr__(self, "G1", check_generator(self.G1))

    @classmethod
    def per_year(cls, G0, G1):
        return cls(np.asarray(G0, dtype=float) / DAYS_PER_YEAR, np.asarray(G1, dtype=float) / DAYS_PER_YEAR)

    @classmethod
    def default(cls):
        return cls.per_year([[-6, 6], [2, -2]], [[-1, 1], [8, -8]])

    def G(self, phi):
        return self.G1 if phi else self.G0


@dataclass(frozen=True)
class CostConfig:
    """Running cost ``lin*I + quad*(I - quad_level)_+^2 + jump*1{I > jump_level} + policy*phi``
    plus ``startup`` per 0->1 switch of ``phi``."""

    lin: float = 1.0
    quad: float = 0.0
    quad_level: float = 200.0
    jump: float = 0.0
    jump_level: float = 300.0
    policy: float = 0.0
    startup: float = 0.0

    def __post_init__(self):
        if min(self.lin, self.quad, self.jump, self.policy, self.startup) < 0:
            raise ModelArgumentError("cost coefficients must be nonnegative")

    @classmethod
    def c1(cls):
        return cls(quad=0.02, quad_level=200.0, policy=50.0)

    @classmethod
    def c2(cls):
        return cls(jump=1000.0, jump_level=300.0, policy=200.0, startup=1400.0)


@dataclass(frozen=True)
class FilterConfig:
    """Belief source for the Bayesian rule.

    ``mode`` is ``"pl"`` (particle learning with the prior below) or
    ``"exact"`` (exact filter with rates at the prior mean).
    """

    mode: str = "pl"
    J: int = 3000
    scheme: str = "residual"
    trigger: str = "every"
    ess_threshold: float = 0.5
    theta1_prior: tuple = (1700.0, 7300.0)
    theta2_prior: tuple = (25.0, 100.0)

    def __post_init__(self):
        if self.mode not in ("pl", "exact"):
            raise ModelArgumentError("filter mode must be 'pl' or 'exact'")
        if self.J < 1:
            raise ModelArgumentError("J must be at least 1")


@dataclass(frozen=True)
class ScenarioDesign:
    """How outbreak rates are drawn for each scenario."""

    theta1_shape: float = 1700.0
    theta1_rate: float = 7300.0
    theta2: float = 0.25


# ---------------------------------------------------------------------------
# EWMA, rules, costs
# ---------------------------------------------------------------------------

def ewma(times, values, t, kappa, literal=False):
    """Moving average of a piecewise-constant path at time ``t``.

    ``values[k]`` holds on ``[times[k], times[k+1])``. The default is the
    normalized backward-discounted average
    ``int e^{-kappa (t-s)} I_s ds / int e^{-kappa (t-s)} ds``; ``literal``
    gives ``(1/t) int e^{-kappa s} I_s ds`` instead.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    t0 = times[0]
    if t <= t0:
        return float(values[0])
    edges = np.append(times[times < t], t)
    vals = values[: len(edges) - 1]
    lo, hi = edges[:-1] - t0, edges[1:] - t0
    if literal:
        w = (np.exp(-kappa * lo) - np.exp(-kappa * hi)) / kappa
        return float(np.dot(w, vals) / (t - t0))
    T = t - t0
    w = np.exp(-kappa * (T - hi)) * (-np.expm1(-kappa * (hi - lo))) / kappa
    return float(np.dot(w, vals) / (-np.expm1(-kappa * T) / kappa))


@njit(cache=True, inline="always")
def _ewma_advance(num, den, value, dt, kappa):
    decay = math.exp(-kappa * dt)
    grow = -math.expm1(-kappa * dt) / kappa
    return num * decay + value * grow, den * decay + grow


@njit(cache=True)
def _decide(code, upper, lower, I_high, I, trend, pi2, M, phi):
    if code == BASELINE:
        return 0
    if code == ORACLE:
        return 1 if M == 1 else 0
    x = trend if code == INFECTEDS else pi2
    if phi == 0:
        if (code == INFECTEDS and x > upper) or (code == BAYESIAN and x >= upper):
            return 1
        return 0
    if ((code == INFECTEDS and x < lower) or (code == BAYESIAN and x <= lower)) and I < I_high:
        return 0
    return 1


def evaluate_rule(rule: PolicyRule, I, ewma_value=None, pi2=None, M=None, phi_prev=0):
    """Countermeasure after an event; ``M`` is the 1-based true season."""
    if phi_prev not in (0, 1):
        raise ModelArgumentError("phi must be 0 or 1")
    if rule.variant == "oracle" and M is None:
        raise ConfigurationError("the oracle rule needs the true season")
    if rule.variant == "infecteds" and ewma_value is None:
        raise ConfigurationError("the infecteds rule needs the moving average")
    if rule.variant == "bayesian" and pi2 is None:
        raise ConfigurationError("the Bayesian rule needs the high-season belief")
    trend = 0.0 if ewma_value is None else float(I - ewma_value)
    m0 = 0 if M is None else int(M) - 1
    return int(_decide(rule.code, rule.upper, rule.lower, rule.I_high, float(I), trend,
                       0.0 if pi2 is None else float(pi2), m0, int(phi_prev)))


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-constant record: row ``k`` holds on ``[times[k], times[k+1])``."""

    times: np.ndarray
    I: np.ndarray
    M: np.ndarray
    phi: np.ndarray
    pi2: np.ndarray
    t_end: float
    phi_before: int = 0

    def durations(self):
        return np.diff(np.append(self.times, self.t_end))

    def split(self, t):
        """Two trajectories on ``[t0, t]`` and ``[t, t_end]``."""
        # rows starting exactly at t belong to the tail
        k = int(np.searchsorted(self.times, t, side="left"))
        head = Trajectory(self.times[:k], self.I[:k], self.M[:k], self.phi[:k], self.pi2[:k], t, self.phi_before)
        before = int(self.phi[k - 1]) if k >= 1 else self.phi_before
        if k < len(self.times) and self.times[k] == t:
            tail = Trajectory(self.times[k:], self.I[k:], self.M[k:], self.phi[k:], self.pi2[k:], self.t_end, before)
        else:
            # the cut falls inside row k-1, which continues into the tail
            j = k - 1
            tail = Trajectory(np.concatenate([[t], self.times[k:]]), self.I[j:], self.M[j:], self.phi[j:],
                              self.pi2[j:], self.t_end, before)
        return head, tail


def startups(traj: Trajectory):
    phi = np.concatenate([[traj.phi_before], traj.phi]).astype(int)
    return int(np.sum((phi[1:] == 1) & (phi[:-1] == 0)))


def path_cost(traj: Trajectory, cfg: CostConfig):
    dt = traj.durations()
    I = traj.I.astype(float)
    rate = (cfg.lin * I + cfg.quad * np.maximum(I - cfg.quad_level, 0.0) ** 2
            + cfg.jump * (I > cfg.jump_level) + cfg.policy * (traj.phi == 1))
    return float(np.dot(rate, dt)) + cfg.startup * startups(traj)


def cost_c1(traj: Trajectory):
    return path_cost(traj, CostConfig.c1())


def cost_c2(traj: Trajectory):
    return path_cost(traj, CostConfig.c2())


# ---------------------------------------------------------------------------
# controlled simulation kernel
# ---------------------------------------------------------------------------

# per-scenario accumulators; the two cost slots carry their own thresholds
INT_I, INT_PHI, N_START, N_EVENTS = 0, 1, 2, 3
INT_QUAD = 4      # 4, 5
INT_JUMP = 6      # 6, 7
OCC = 8           # 8..11: time at (phi, M), index OCC + 2*phi + M
SWITCHES = 12     # 12..15: season switches leaving (phi, M)
N_ACC = 16


@njit(cache=True, nogil=True)
def _controlled(I0, M0, T, N, eta, th1, th2, G0, G1, code, upper, lower, kappa, I_high, literal,
                quad_levels, jump_levels, sim_rng, filt_rng, fmode, a0, b0, idx, coef, J, scheme, always,
                ess_frac, cap, fth, record, rec_t, rec_I, rec_M, rec_phi, rec_pi):
    acc = np.zeros(N_ACC)
    t = 0.0
    I = I0
    M = M0
    phi = 0
    pi2 = 0.0 if M0 == 0 else 1.0
    num = 0.0
    den = 0.0
    last_ev = 0.0
    nrec = 0
    if record:
        rec_t[0] = t
        rec_I[0] = I
        rec_M[0] = M
        rec_phi[0] = phi
        rec_pi[0] = pi2
        nrec = 1
    use_pl = code == BAYESIAN and fmode == 0
    use_exact = code == BAYESIAN and fmode == 1
    P = a0.shape[0]
    if use_pl:
        pm = np.full(J, M0, dtype=np.int64)
        pa = np.empty((J, P))
        pb = np.empty((J, P))
        for j in range(J):
            pa[j] = a0
            pb[j] = b0
        plw = np.zeros(J)
    else:
        pm = np.zeros(1, dtype=np.int64)
        pa = np.zeros((1, P))
        pb = np.ones((1, P))
        plw = np.zeros(1)
    counters = np.zeros(3, dtype=np.int64)
    belief = np.zeros(2)
    belief[M0] = 1.0
    H = np.empty(2)
    abar_f = np.empty(2)
    row2 = np.empty(2)
    wrk = np.empty((2, 2))
    while True:
        G = G1 if phi == 1 else G0
        Ifl = float(I)
        a1 = th1[M] * ((Ifl + eta) * (N - Ifl) / N) if I < N else 0.0
        a2 = th2 * Ifl if I > 0 else 0.0
        abar = 0.0 + a1 + a2
        leave = -G[M, M]
        dt_m = sim_rng.exponential() / leave if leave > 0 else np.inf
        dt_r = sim_rng.exponential() / abar if abar > 0 else np.inf
        is_reaction = dt_r <= dt_m
        dt = dt_r if is_reaction else dt_m
        u = sim_rng.random() * (abar if is_reaction else leave) if dt < np.inf else 0.0
        tn = t + dt
        stop = tn > T
        seg = (T - t) if stop else dt
        # running integrals over [t, t + seg) at the current state
        acc[INT_I] += Ifl * seg
        for c in range(2):
            over = Ifl - quad_levels[c]
            if over > 0:
                acc[INT_QUAD + c] += over * over * seg
            if Ifl > jump_levels[c]:
                acc[INT_JUMP + c] += seg
        if phi == 1:
            acc[INT_PHI] += seg
        acc[OCC + 2 * phi + M] += seg
        if code == INFECTEDS:
            if literal:
                num += Ifl * (math.exp(-kappa * t) - math.exp(-kappa * (t + seg))) / kappa
            else:
                num, den = _ewma_advance(num, den, Ifl, seg, kappa)
        if stop:
            break
        t = tn
        if not is_reaction:
            j = M
            cum = 0.0
            for k in range(G.shape[0]):
                if k == M or G[M, k] <= 0:
                    continue
                cum += G[M, k]
                j = k
                if u < cum:
                    break
            acc[SWITCHES + 2 * phi + M] += 1
            M = j
        else:
            q = 0 if (a1 > 0 and u < a1) or a2 <= 0 else 1
            if use_pl or use_exact:
                H[0] = (Ifl + eta) * (N - Ifl) / N if I < N else 0.0
                H[1] = Ifl if I > 0 else 0.0
                gap = t - last_ev
                if use_pl:
                    st = K.pl_step(pm, pa, pb, plw, gap, q, H, G, idx, coef, filt_rng, scheme, always,
                                   ess_frac, cap, counters)
                    if st != 0:
                        acc[N_EVENTS] = -1.0
                        return acc, nrec
                    K.regime_weights(pm, plw, 2, belief)
                else:
                    for i in range(2):
                        abar_f[i] = fth[0, i] * H[0] + fth[1, i] * H[1]
                    K.killed2_row(G[0, 0] - abar_f[0], G[0, 1], G[1, 0], G[1, 1] - abar_f[1], gap, 0, row2)
                    b0_ = belief[0]
                    b1_ = belief[1]
                    K.killed2_row(G[0, 0] - abar_f[0], G[0, 1], G[1, 0], G[1, 1] - abar_f[1], gap, 1, wrk[0])
                    p0 = b0_ * row2[0] + b1_ * wrk[0, 0]
                    p1 = b0_ * row2[1] + b1_ * wrk[0, 1]
                    p0 *= fth[q, 0] * H[q]
                    p1 *= fth[q, 1] * H[q]
                    s = p0 + p1
                    if s > 0:
                        belief[0] = p0 / s
                        belief[1] = p1 / s
                pi2 = belief[1]
                last_ev = t
            I += 1 if q == 0 else -1
            acc[N_EVENTS] += 1
            if code == INFECTEDS:
                avg = num / t if literal else num / den
                trend = I - avg
            else:
                trend = 0.0
            new_phi = _decide(code, upper, lower, I_high, float(I), trend, pi2, M, phi)
            if new_phi == 1 and phi == 0:
                acc[N_START] += 1
            phi = new_phi
        if record and nrec < rec_t.shape[0]:
            rec_t[nrec] = t
            rec_I[nrec] = I
            rec_M[nrec] = M
            rec_phi[nrec] = phi
            rec_pi[nrec] = pi2
            nrec += 1
    return acc, nrec


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    ave_I: float
    policy_freq: float
    days_above: float
    startups: float
    c1: float
    c2: float
    n_events: int
    theta1: float
    occupation: np.ndarray
    switches: np.ndarray
    trajectory: Trajectory | None = None


def scenario_streams(seed, index):
    """Independent generators (rates, simulation, filter) for one scenario."""
    children = np.random.SeedSequence([int(seed), int(index)]).spawn(3)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def _filter_arrays(p: SISParams, fcfg: FilterConfig):
    a0 = np.array([fcfg.theta1_prior[0], fcfg.theta2_prior[0]], dtype=float)
    b0 = np.array([fcfg.theta1_prior[1], fcfg.theta2_prior[1]], dtype=float)
    ties = p.ties()
    fth = ties.expand(a0 / b0)
    return a0, b0, ties.index, ties.coef, fth


def _combine(cfg: CostConfig, acc, slot):
    return (cfg.lin * acc[INT_I] + cfg.quad * acc[INT_QUAD + slot] + cfg.jump * acc[INT_JUMP + slot]
            + cfg.policy * acc[INT_PHI] + cfg.startup * acc[N_START])


def controlled_simulate(p: SISParams, ctrl: ControlledRegimeModel, rule: PolicyRule, fcfg: FilterConfig = None,
                        costs=None, seed=0, index=0, design: ScenarioDesign = None, record=False,
                        literal_ewma=False, theta1=None, max_record=None) -> ScenarioResult:
    """Simulate one controlled scenario on ``[0, p.T]``.

    Scenario ``index`` under master ``seed`` always gets the same rate draw
    and random streams, whatever the rule. ``costs`` is a pair of cost
    configurations reported as ``c1`` and ``c2``. ``days_above`` uses the
    jump level of the second.
    """
    fcfg = fcfg or FilterConfig()
    design = design or ScenarioDesign()
    costs = costs or (CostConfig.c1(), CostConfig.c2())
    th_rng, sim_rng, filt_rng = scenario_streams(seed, index)
    draw = th_rng.gamma(design.theta1_shape, 1.0 / design.theta1_rate)
    if theta1 is None:
        theta1 = draw
    p = p.with_(theta1=float(theta1), theta2=design.theta2)
    th1 = np.array([p.theta1, p.theta1_high])
    a0, b0, idx, coef, fth = _filter_arrays(p, fcfg)
    if record:
        n_rec = max_record or int(4 * p.N * p.T * max(th1.max(), p.theta2) + 1000)
    else:
        n_rec = 1
    rec_t = np.empty(n_rec)
    rec_I = np.empty(n_rec, dtype=np.int64)
    rec_M = np.empty(n_rec, dtype=np.int64)
    rec_phi = np.empty(n_rec, dtype=np.int64)
    rec_pi = np.empty(n_rec)
    upper = 0.0 if math.isnan(rule.upper) else rule.upper
    lower = 0.0 if math.isnan(rule.lower) else rule.lower
    quad_levels = np.array([c.quad_level for c in costs], dtype=float)
    jump_levels = np.array([c.jump_level for c in costs], dtype=float)
    acc, nrec = _controlled(int(p.I0), p.M0 - 1, float(p.T), float(p.N), float(p.eta), th1, float(p.theta2),
                            ctrl.G0, ctrl.G1, rule.code, float(upper), float(lower), float(rule.kappa),
                            float(rule.I_high), bool(literal_ewma), quad_levels, jump_levels,
                            sim_rng, filt_rng, 0 if fcfg.mode == "pl" else 1, a0, b0, idx, coef, int(fcfg.J),
                            K.SCHEMES[fcfg.scheme], fcfg.trigger == "every", float(fcfg.ess_threshold),
                            10_000, fth, bool(record), rec_t, rec_I, rec_M, rec_phi, rec_pi)
    if acc[N_EVENTS] < 0:
        raise RuntimeError("belief filter collapsed during a controlled scenario")
    if record and nrec >= n_rec:
        raise RuntimeError("trajectory buffer exhausted; raise max_record")
    traj = None
    if record:
        traj = Trajectory(rec_t[:nrec].copy(), rec_I[:nrec].copy(), rec_M[:nrec] + 1, rec_phi[:nrec].copy(),
                          rec_pi[:nrec].copy(), float(p.T))
    return ScenarioResult(
        ave_I=acc[INT_I] / p.T,
        policy_freq=acc[INT_PHI] / p.T,
        days_above=acc[INT_JUMP + 1],
        startups=acc[N_START],
        c1=_combine(costs[0], acc, 0),
        c2=_combine(costs[1], acc, 1),
        n_events=int(acc[N_EVENTS]),
        theta1=float(theta1),
        occupation=acc[OCC:OCC + 4].reshape(2, 2).copy(),
        switches=acc[SWITCHES:SWITCHES + 4].reshape(2, 2).copy(),
        trajectory=traj,
    )


# ---------------------------------------------------------------------------
# Monte Carlo evaluation
# ---------------------------------------------------------------------------

SUMMARY_FIELDS = ("ave_I", "policy_freq", "days_above", "startups", "c1", "c2")


@dataclass
class ScenarioSummary:
    rule: str
    n: int
    mean: dict
    se: dict
    raw: dict = field(repr=False, default_factory=dict)

    def row(self):
        out = {"rule": self.rule, "scenarios": self.n}
        for f in SUMMARY_FIELDS:
            out[f] = self.mean[f]
            out[f + "_se"] = self.se[f]
        return out


def summarize(rule_name, results):
    raw = {f: np.array([getattr(r, f) for r in results], dtype=float) for f in SUMMARY_FIELDS}
    n = len(results)
    mean = {f: float(v.mean()) for f, v in raw.items()}
    se = {f: float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0 for f, v in raw.items()}
    return ScenarioSummary(rule_name, n, mean, se, raw)


def thread_count():
    """Worker threads from ``HMSKM_THREADS``; 0 or unset means sequential."""
    raw = os.environ.get("HMSKM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"HMSKM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigurationError("HMSKM_THREADS must be nonnegative")
    return n


def monte_carlo_costs(p: SISParams, ctrl: ControlledRegimeModel, rules, n_scenarios, seed=0,
                      fcfg: FilterConfig = None, design: ScenarioDesign = None, costs=None, threads=None,
                      progress=None):
    """Expected costs and summaries per rule over common scenarios."""
    if n_scenarios < 1:
        raise ModelArgumentError("need at least one scenario")
    threads = thread_count() if threads is None else threads
    report = []
    for rule in rules:
        def one(s, rule=rule):
            return controlled_simulate(p, ctrl, rule, fcfg, costs=costs, seed=seed, index=s, design=design)

        if threads > 0:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(one, range(n_scenarios)))
        else:
            results = [one(s) for s in range(n_scenarios)]
        report.append(summarize(rule.name, results))
        if progress:
            progress(rule, report[-1])
    return report
