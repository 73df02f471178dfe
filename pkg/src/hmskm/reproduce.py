"""Experiment suites emitting CSV data plus threshold checks.

Suites: ``fig2`` (sample path), ``fig3`` (rate posterior with the season
observed), ``fig4`` (exact season filter), ``fig5`` (joint particle
learning), ``table2`` (PL/Storvik/Liu-West comparison) and ``table3``
(policy costs). ``desk`` scale shrinks particle and replicate counts.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conjugate import ci_halfwidth, posterior_series, update_stats
from .errors import ConfigurationError
from .io import write_event_path, write_rows
from .particle_learning import cloud_posterior_summary, run_particle_filter
from .policy import (ControlledRegimeModel, FilterConfig, monte_carlo_costs, table3_rules,
                     thread_count, SUMMARY_FIELDS)
from .regime_filter import run_exact_filter
from .sis import HIGH, SISParams, build_sis, infecteds_series, simulate_sis

SUITES = ("fig2", "fig3", "fig4", "fig5", "table2", "table3")
SCALES = {
    "desk": {"fig5_J": 2000, "t2_J": 2000, "t2_runs": 30, "t2_bench": 20_000, "t3_scenarios": 200, "t3_J": 1500},
    "full": {"fig5_J": 5000, "t2_J": 2000, "t2_runs": 100, "t2_bench": 20_000, "t3_scenarios": 500, "t3_J": 3000},
}
T1, T2 = 120.0, 270.0


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class SuiteResult:
    suite: str
    files: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    data: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


def reference_path(p: SISParams, seed=0, max_tries=10_000):
    """First seeded path with one high season starting in [30, 90] and ending in [150, 210]."""
    for k in range(max_tries):
        path = simulate_sis(p, seed=(seed, k))
        rt, rm = path.regime_times, path.regimes
        if len(rt) == 2 and rm[0] == HIGH and 30 <= rt[0] <= 90 and 150 <= rt[1] <= 210:
            return path, k
    raise RuntimeError("no path with a single mid-season high period found")


def _threads(n):
    return thread_count() if n is None else n


def _map(fn, items, threads):
    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def run_fig2(p, out, seed, **_):
    sys, _, _, _ = build_sis(p)
    path, k = reference_path(p, seed)
    path.validate(sys)
    f_path = out / "fig2_path.csv"
    write_event_path(path, f_path)
    times, I = infecteds_series(path)
    M = np.array([path.regime_at(t) for t in times])
    f_series = out / "fig2_series.csv"
    write_rows(f_series, ["time", "I", "M"], zip(times, I, M))
    res = SuiteResult("fig2", [f_path, f_series], data={"path": path, "path_seed_offset": k})
    res.checks.append(Check("fig2.path_valid", True, f"{path.n_events} events, {len(path.regime_times)} switches"))
    return res


def run_fig3(p, out, seed, **_):
    sys, _, _, prior = build_sis(p)
    path, _ = reference_path(p, seed)
    grid = np.arange(0.0, path.t_end + 1e-9, 1.0)
    rows = posterior_series(sys, path, prior, grid)
    f = out / "fig3_posterior.csv"
    write_rows(f, ["time", "q", "i", "mean", "q2.5", "q97.5"], rows)
    res = SuiteResult("fig3", [f])
    quarter = update_stats(prior, sys, path.truncate(sys.deltas, path.t_end / 4))
    final = update_stats(prior, sys, path)
    for q, truth in ((1, p.theta1), (2, p.theta2)):
        ratio = ci_halfwidth(final, q, 1) / ci_halfwidth(quarter, q, 1)
        res.checks.append(Check(f"fig3.theta{q}_narrowing", ratio < 0.5, f"half-width ratio {ratio:.3f} < 0.5"))
    return res


def run_fig4(p, out, seed, **_):
    sys, rm, _, _ = build_sis(p)
    path, _ = reference_path(p, seed)
    pi0 = np.eye(2)[p.M0 - 1]
    fo = run_exact_filter(sys, rm, None, path, pi0, grid=0.25)
    keep = ~fo.is_event
    t = fo.times[keep]
    pi2 = fo.pi[keep, 1]
    M = np.array([path.regime_at(x) for x in t])
    f = out / "fig4_belief.csv"
    write_rows(f, ["time", "pi1", "pi2", "M"], zip(t, fo.pi[keep, 0], pi2, M))
    hi, lo = pi2[M == HIGH].mean(), pi2[M != HIGH].mean()
    res = SuiteResult("fig4", [f])
    res.checks.append(Check("fig4.tracks_season", hi > 0.5 > lo, f"mean belief {hi:.3f} in high, {lo:.3f} in low"))
    return res


def run_fig5(p, out, seed, J=None, scale="desk", **_):
    J = J or SCALES[scale]["fig5_J"]
    sys, rm, _, prior = build_sis(p)
    path, _ = reference_path(p, seed)
    grid = np.arange(0.0, path.t_end + 1e-9, 3.0)
    run = run_particle_filter(sys, rm, path, prior, J, "pl", seed=seed, snapshot_times=grid)
    rows = []
    for t in grid:
        s = cloud_posterior_summary(run.snapshots[float(t)])
        rows.append((t, s.pi[1], s.median[0, 0], s.lower[0, 0], s.upper[0, 0],
                     s.median[1, 0], s.lower[1, 0], s.upper[1, 0], path.regime_at(t)))
    f = out / "fig5_joint.csv"
    write_rows(f, ["time", "pi2", "theta1_median", "theta1_q2.5", "theta1_q97.5",
                   "theta2_median", "theta2_q2.5", "theta2_q97.5", "M"], rows)
    arr = np.array(rows)
    hi, lo = arr[arr[:, 8] == HIGH, 1].mean(), arr[arr[:, 8] != HIGH, 1].mean()
    res = SuiteResult("fig5", [f], data={"acceptance": run.acceptance_rate})
    res.checks.append(Check("fig5.tracks_season", hi > 0.5 > lo, f"mean belief {hi:.3f} in high, {lo:.3f} in low"))
    return res


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def compare_smc(p, path, J, runs, bench_J, seed=0, algorithms=("pl", "storvik", "lw"), times=(T1, T2),
                threads=None):
    """Coverage of the true ``theta1`` and belief error against a large PL run.

    The error at ``t`` is the root mean square over runs of the high-season
    belief minus the benchmark belief.
    """
    sys, rm, _, prior = build_sis(p)
    times = tuple(float(t) for t in times)
    bench = run_particle_filter(sys, rm, path, prior, bench_J, "pl",
                                rng=np.random.default_rng([seed, 99, 0]), snapshot_times=times)
    ref = {t: float(cloud_posterior_summary(bench.snapshots[t]).pi[1]) for t in times}
    threads = _threads(threads)
    table = {}
    for a_i, algo in enumerate(algorithms):
        def one(r, algo=algo, a_i=a_i):
            run = run_particle_filter(sys, rm, path, prior, J, algo, rng=np.random.default_rng([seed, a_i, r]),
                                      snapshot_times=times)
            out = {}
            for t in times:
                s = cloud_posterior_summary(run.snapshots[t])
                out[t] = (s.lower[0, 0] <= p.theta1 <= s.upper[0, 0], s.pi[1], s.median[0, 0],
                          s.lower[0, 0], s.upper[0, 0])
            return out

        res = _map(one, range(runs), threads)
        table[algo] = {
            t: {
                "coverage": float(np.mean([r[t][0] for r in res])),
                "pi2_se": float(np.sqrt(np.mean([(r[t][1] - ref[t]) ** 2 for r in res]))),
                "pi2_mean": float(np.mean([r[t][1] for r in res])),
                "median": [r[t][2] for r in res],
                "lower": [r[t][3] for r in res],
                "upper": [r[t][4] for r in res],
            }
            for t in times
        }
    return table, ref


def run_table2(p, out, seed, J=None, runs=None, bench_J=None, scale="desk", threads=None, **_):
    sc = SCALES[scale]
    J, runs, bench_J = J or sc["t2_J"], runs or sc["t2_runs"], bench_J or sc["t2_bench"]
    path, _ = reference_path(p, seed)
    table, ref = compare_smc(p, path, J, runs, bench_J, seed=seed, threads=threads)
    rows = []
    for algo, per in table.items():
        rows.append([algo, per[T1]["coverage"], per[T2]["coverage"], per[T1]["pi2_se"], per[T2]["pi2_se"]])
    f = out / "table2.csv"
    write_rows(f, ["algorithm", "coverage_T1", "coverage_T2", "pi2_se_T1", "pi2_se_T2"], rows)
    fq = out / "table2_quantiles.csv"
    qrows = [(algo, r, per[T2]["lower"][r], per[T2]["median"][r], per[T2]["upper"][r])
             for algo, per in table.items() for r in range(runs)]
    write_rows(fq, ["algorithm", "run", "q2.5_T2", "median_T2", "q97.5_T2"], qrows)
    res = SuiteResult("table2", [f, fq], data={"table": table, "benchmark": ref, "J": J, "runs": runs})
    pl, st, lw = table["pl"], table["storvik"], table["lw"]
    res.checks += [
        Check("table2.pl_coverage_T1", pl[T1]["coverage"] >= 0.85, f"{pl[T1]['coverage']:.3f} >= 0.85"),
        Check("table2.coverage_order_T2",
              pl[T2]["coverage"] >= st[T2]["coverage"] > lw[T2]["coverage"],
              f"PL {pl[T2]['coverage']:.3f} >= Storvik {st[T2]['coverage']:.3f} > LW {lw[T2]['coverage']:.3f}"),
        Check("table2.pi2_se_order_T1", pl[T1]["pi2_se"] <= st[T1]["pi2_se"],
              f"PL {pl[T1]['pi2_se']:.3f} <= Storvik {st[T1]['pi2_se']:.3f}"),
    ]
    return res


def run_table3(p, out, seed, J=None, scenarios=None, scale="desk", threads=None, filter_mode="pl", rules=None,
               progress=None, **_):
    sc = SCALES[scale]
    J, n = J or sc["t3_J"], scenarios or sc["t3_scenarios"]
    rules = rules or table3_rules()
    report = monte_carlo_costs(p, ControlledRegimeModel.default(), rules, n, seed=seed,
                               fcfg=FilterConfig(mode=filter_mode, J=J), threads=_threads(threads), progress=progress)
    f = out / "table3.csv"
    header = ["rule", "scenarios"] + [x for f_ in SUMMARY_FIELDS for x in (f_, f_ + "_se")]
    write_rows(f, header, [[r.row()[h] for h in header] for r in report])
    res = SuiteResult("table3", [f], data={"report": report})
    by = {r.rule: r for r in report}
    base = by.get("Baseline")
    if base is None:
        return res
    bI = base.mean["ave_I"]
    res.checks.append(Check("table3.baseline_ave_I", 140 <= bI <= 210, f"{bI:.1f} in [140, 210]"))
    if "Oracle" in by:
        o = by["Oracle"].mean["c1"]
        res.checks.append(Check("table3.oracle_c1_half", o < 0.5 * base.mean["c1"],
                                f"{o:.0f} < 0.5 x {base.mean['c1']:.0f}"))
    for r in report:
        if r.rule == "Baseline":
            continue
        ok = r.mean["c1"] < base.mean["c1"] and r.mean["c2"] < base.mean["c2"]
        res.checks.append(Check(f"table3.{r.rule}_beats_baseline", ok,
                                f"c1 {r.mean['c1']:.0f} vs {base.mean['c1']:.0f}, "
                                f"c2 {r.mean['c2']:.0f} vs {base.mean['c2']:.0f}"))
    b1, b2 = by.get("Bayesian(0.8,0.01)"), by.get("Bayesian(0.95,0.05)")
    if b1 and b2:
        res.checks.append(Check("table3.bayes_threshold_order", b1.mean["ave_I"] < b2.mean["ave_I"],
                                f"{b1.mean['ave_I']:.1f} < {b2.mean['ave_I']:.1f}"))
    return res


RUNNERS = {"fig2": run_fig2, "fig3": run_fig3, "fig4": run_fig4, "fig5": run_fig5,
           "table2": run_table2, "table3": run_table3}


def run_reproduction(suite, scale="desk", seed=0, out=".", params: SISParams = None, **overrides) -> SuiteResult:
    """Run one suite, write its CSV files under ``out`` and evaluate its checks."""
    if suite not in RUNNERS:
        raise ConfigurationError(f"unknown suite {suite!r}; choose from {SUITES}")
    if scale not in SCALES:
        raise ConfigurationError(f"unknown scale {scale!r}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    res = RUNNERS[suite](params or SISParams(), out, seed, scale=scale, **overrides)
    res.seconds = time.perf_counter() - start
    return res
