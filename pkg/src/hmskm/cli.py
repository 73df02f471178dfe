"""Command-line driver.

Exit status: 0 when everything ran and all checks passed, 2 when a
reproduction check failed, 1 on usage or configuration errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, HMSKMError
from .io import load_model, load_rules, load_theta, read_event_path, write_event_path, write_rows

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser():
    p = _Parser(prog="hmskm", description="Simulation and filtering for regime-modulated reaction systems.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--replay", metavar="MANIFEST", help="re-run the command recorded in a run manifest")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a path and write it as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--horizon", type=float)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--hide-regime", action="store_true", help="omit regime rows")

    s = sub.add_parser("filter-exact", help="exact regime belief with known rates")
    s.add_argument("--model", required=True)
    s.add_argument("--theta", help="rates JSON; defaults to the model's rates")
    s.add_argument("--events", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", type=float, default=1.0, help="spacing of extra sample times (0 = events only)")

    s = sub.add_parser("filter-pl", help="joint regime and rate inference with particles")
    s.add_argument("--model", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--particles", type=_positive, default=2000)
    s.add_argument("--scheme", default="residual", choices=["multinomial", "residual", "stratified", "systematic"])
    s.add_argument("--trigger", default="every", choices=["every", "ess"])
    s.add_argument("--algorithm", default="pl", choices=["pl", "storvik", "lw"])
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--grid", type=float, default=1.0, help="spacing of summary rows in days")
    s.add_argument("--out", required=True)

    s = sub.add_parser("compare-smc", help="coverage and belief error of PL, Storvik and Liu-West")
    s.add_argument("--model", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--particles", type=_positive, default=2000)
    s.add_argument("--runs", type=_positive, default=30)
    s.add_argument("--bench-particles", type=_positive, default=20_000)
    s.add_argument("--times", type=float, nargs="+", default=[120.0, 270.0])
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("policy-eval", help="Monte Carlo costs of countermeasure rules")
    s.add_argument("--model", required=True)
    s.add_argument("--rules", required=True)
    s.add_argument("--scenarios", type=_positive, default=200)
    s.add_argument("--particles", type=_positive, default=1500)
    s.add_argument("--filter", default="pl", choices=["pl", "exact"])
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("reproduce", help="run an experiment suite and check its thresholds")
    s.add_argument("suite", choices=["fig2", "fig3", "fig4", "fig5", "table2", "table3"])
    s.add_argument("--scale", default="desk", choices=["desk", "full"])
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out-dir", default="results")
    s.add_argument("--particles", type=_positive)
    s.add_argument("--runs", type=_positive)
    s.add_argument("--bench-particles", type=_positive)
    s.add_argument("--scenarios", type=_positive)
    s.add_argument("--N", type=_positive, help="population size override")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(a):
    from .simulate import SimConfig, simulate_path
    from .sis import simulate_sis

    m = load_model(a.model)
    horizon = m.horizon if a.horizon is None else a.horizon
    if horizon < 0:
        raise ConfigurationError("horizon must be nonnegative")
    if m.sis is not None:
        path = simulate_sis(m.sis, seed=a.seed, horizon=horizon)
    else:
        path = simulate_path(m.system, m.regime_model, m.initial, SimConfig(horizon, a.seed))
    if a.hide_regime:
        path = path.hidden()
    write_event_path(path, a.out)
    return {"events": int(path.n_events)}


def _events(a, m):
    if not Path(a.events).exists():
        raise ConfigurationError(f"events file not found: {a.events}")
    return read_event_path(a.events, X0=m.initial.X, M0=m.initial.M, t0=m.initial.t)


def cmd_filter_exact(a):
    from .regime_filter import run_exact_filter

    m = load_model(a.model)
    theta = load_theta(a.theta, m.system) if a.theta else None
    path = _events(a, m)
    pi0 = np.eye(m.system.mbar)[path.M0 - 1]
    fo = run_exact_filter(m.system, m.regime_model, theta, path, pi0, grid=a.grid)
    header = ["t"] + [f"pi{i + 1}" for i in range(m.system.mbar)] + ["event"]
    write_rows(a.out, header, ([t, *pi, int(e)] for t, pi, e in zip(fo.times, fo.pi, fo.is_event)))
    return {"rows": len(fo.times)}


def cmd_filter_pl(a):
    from .particle_learning import cloud_posterior_summary, run_particle_filter

    m = load_model(a.model)
    path = _events(a, m)
    if a.grid <= 0:
        raise ConfigurationError("grid must be positive")
    grid = np.arange(path.t0, path.t_end + 1e-9, a.grid)
    run = run_particle_filter(m.system, m.regime_model, path, m.prior, a.particles, a.algorithm, seed=a.seed,
                              scheme=a.scheme, trigger=a.trigger, m0=path.M0, snapshot_times=grid)
    qb, mb = m.system.qbar, m.system.mbar
    header = ["t"] + [f"pi{i + 1}" for i in range(mb)]
    for q in range(qb):
        for i in range(mb):
            header += [f"theta{q + 1}_{i + 1}_{s}" for s in ("median", "q2.5", "q97.5")]
    rows = []
    for t in grid:
        s = cloud_posterior_summary(run.snapshots[float(t)])
        row = [t, *s.pi]
        for q in range(qb):
            for i in range(mb):
                row += [s.median[q, i], s.lower[q, i], s.upper[q, i]]
        rows.append(row)
    write_rows(a.out, header, rows)
    return {"rows": len(rows), "acceptance_rate": float(run.acceptance_rate)}


def cmd_compare_smc(a):
    from .reproduce import compare_smc

    m = load_model(a.model)
    if m.sis is None:
        raise ConfigurationError("compare-smc needs the sis preset")
    path = _events(a, m)
    table, ref = compare_smc(m.sis, path, a.particles, a.runs, a.bench_particles, seed=a.seed, times=a.times)
    times = [float(t) for t in a.times]
    header = ["algorithm"] + [f"coverage_{t:g}" for t in times] + [f"pi2_se_{t:g}" for t in times]
    rows = [[algo] + [per[t]["coverage"] for t in times] + [per[t]["pi2_se"] for t in times]
            for algo, per in table.items()]
    write_rows(a.out, header, rows)
    return {"benchmark_pi2": {f"{t:g}": v for t, v in ref.items()}}


def cmd_policy_eval(a):
    from .policy import SUMMARY_FIELDS, ControlledRegimeModel, FilterConfig, monte_carlo_costs

    m = load_model(a.model)
    if m.sis is None:
        raise ConfigurationError("policy-eval needs the sis preset")
    rules = load_rules(a.rules)
    report = monte_carlo_costs(m.sis.with_(T=m.horizon), ControlledRegimeModel.default(), rules, a.scenarios,
                               seed=a.seed, fcfg=FilterConfig(mode=a.filter, J=a.particles))
    header = ["rule", "scenarios"] + [x for f in SUMMARY_FIELDS for x in (f, f + "_se")]
    write_rows(a.out, header, [[r.row()[h] for h in header] for r in report])
    return {"rules": [r.rule for r in report]}


def cmd_reproduce(a):
    from .reproduce import run_reproduction
    from .sis import SISParams

    params = SISParams() if a.N is None else SISParams(N=a.N)
    overrides = {k: v for k, v in (("J", a.particles), ("runs", a.runs), ("bench_J", a.bench_particles),
                                   ("scenarios", a.scenarios)) if v is not None}
    res = run_reproduction(a.suite, a.scale, a.seed, a.out_dir, params, **overrides)
    for c in res.checks:
        print(c.line())
    report = {"suite": a.suite, "scale": a.scale, "passed": res.passed, "seconds": res.seconds,
              "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in res.checks],
              "files": [str(f) for f in res.files]}
    with open(Path(a.out_dir) / f"{a.suite}_report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    failing = [c.name for c in res.checks if not c.passed]
    if failing:
        print("failed: " + ", ".join(failing), file=sys.stderr)
    return {"passed": res.passed, "failed_checks": failing}


COMMANDS = {"simulate": cmd_simulate, "filter-exact": cmd_filter_exact, "filter-pl": cmd_filter_pl,
            "compare-smc": cmd_compare_smc, "policy-eval": cmd_policy_eval, "reproduce": cmd_reproduce}


def _manifest_path(a):
    if a.command == "reproduce":
        return Path(a.out_dir) / f"{a.suite}_manifest.json"
    return Path(str(a.out) + ".manifest.json")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.replay:
            with open(a.replay) as fh:
                argv = json.load(fh)["argv"]
            a = parser.parse_args(argv)
        if not a.command:
            raise UsageError("a subcommand is required")
    except UsageError as e:
        print(f"hmskm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, KeyError) as e:
        print(f"hmskm: error: cannot read manifest: {e}", file=sys.stderr)
        return EXIT_USAGE
    start = time.perf_counter()
    try:
        info = COMMANDS[a.command](a)
    except (ConfigurationError, FileNotFoundError) as e:
        print(f"hmskm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except HMSKMError as e:
        print(f"hmskm: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    manifest = {"version": __version__, "command": a.command, "argv": argv,
                "arguments": {k: v for k, v in vars(a).items() if k != "replay"},
                "seconds": time.perf_counter() - start, "result": info}
    mpath = _manifest_path(a)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    if a.command == "reproduce" and not info["passed"]:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
