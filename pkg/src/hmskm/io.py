"""File formats: event-path CSV, model descriptors, rate tables, rule lists."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conjugate import SufficientStats
from .errors import ConfigurationError, ModelArgumentError
from .kinetics import EventPath, RateParams, RateTies, ReactionSystem, RegimeModel, SystemState, make_law
from .sis import SISParams, build_sis

EVENT, REGIME = "event", "regime"


# ---------------------------------------------------------------------------
# event paths
# ---------------------------------------------------------------------------

def write_event_path(path: EventPath, dest):
    """Write ``time,kind,value`` rows; start/end metadata goes in ``#`` lines."""
    rows = [(float(t), EVENT, int(q)) for t, q in zip(path.times, path.reactions)]
    if path.has_regime_path:
        rows += [(float(t), REGIME, int(m)) for t, m in zip(path.regime_times, path.regimes)]
    # regime switches sort before events at equal times; ties do not occur in practice
    rows.sort(key=lambda r: (r[0], r[1] == EVENT))
    with open(dest, "w", newline="") as fh:
        fh.write(f"# t0={path.t0!r}\n# t_end={path.t_end!r}\n")
        fh.write("# X0=" + " ".join(str(int(x)) for x in path.X0) + "\n")
        fh.write(f"# M0={int(path.M0)}\n# regime_observed={int(path.has_regime_path)}\n")
        w = csv.writer(fh)
        w.writerow(["time", "kind", "value"])
        for t, kind, v in rows:
            w.writerow([repr(t), kind, v])


def read_event_path(src, X0=None, M0=None, t0=None, t_end=None) -> EventPath:
    """Read a path written by :func:`write_event_path`.

    Keyword arguments fill in metadata missing from the file.
    """
    meta = {}
    body = []
    with open(src, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
            elif line.strip():
                body.append(line)
    reader = csv.reader(body)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["time", "kind", "value"]:
        raise ConfigurationError(f"{src}: expected header time,kind,value")
    ev_t, ev_q, rg_t, rg_m = [], [], [], []
    for n, row in enumerate(reader, start=2):
        if len(row) != 3:
            raise ConfigurationError(f"{src}: line {n} does not have three fields")
        t, kind, v = float(row[0]), row[1].strip(), int(row[2])
        if kind == EVENT:
            ev_t.append(t)
            ev_q.append(v)
        elif kind == REGIME:
            rg_t.append(t)
            rg_m.append(v)
        else:
            raise ConfigurationError(f"{src}: line {n} has unknown kind {kind!r}")
    if "X0" in meta:
        X0 = [int(x) for x in meta["X0"].split()]
    if X0 is None:
        raise ConfigurationError(f"{src}: initial state missing; pass X0")
    M0 = int(meta.get("M0", M0 if M0 is not None else 1))
    t0 = float(meta.get("t0", t0 if t0 is not None else 0.0))
    if "t_end" in meta:
        t_end = float(meta["t_end"])
    elif t_end is None:
        t_end = max([t0] + ev_t + rg_t)
    observed = meta.get("regime_observed", "1" if rg_t else "0") == "1"
    return EventPath(t0, X0, M0, ev_t, ev_q, t_end,
                     rg_t if observed else None, rg_m if observed else None)


# ---------------------------------------------------------------------------
# model descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Everything a descriptor defines. ``sis`` is set for the SIS preset."""

    system: ReactionSystem
    regime_model: RegimeModel
    initial: SystemState
    prior: SufficientStats
    horizon: float
    sis: SISParams | None = None


def _load_json(src):
    if isinstance(src, (dict, list)):
        return src
    try:
        with open(src) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"file not found: {src}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{src}: invalid JSON ({e})") from None


def load_model(src) -> ModelBundle:
    """Build a model from a JSON descriptor (path or dict).

    ``{"preset": "sis", "overrides": {...}}`` gives the SIS system with
    per-field overrides. A general descriptor lists ``stoichiometry``,
    ``laws`` (catalog names plus parameters), ``rates`` (a reaction x regime
    table, or ``free`` values with ``ties``), ``generator``, ``initial`` and
    optionally ``prior`` and ``horizon``.
    """
    d = _load_json(src)
    try:
        if "preset" in d:
            if d["preset"] != "sis":
                raise ConfigurationError(f"unknown preset {d['preset']!r}")
            p = SISParams.from_dict(d.get("overrides", {}))
            sys, rm, state, prior = build_sis(p)
            return ModelBundle(sys, rm, state, prior, float(d.get("horizon", p.T)), p)
        deltas = np.asarray(d["stoichiometry"], dtype=np.int64)
        laws = tuple(make_law(l["name"], **l.get("params", {})) for l in d["laws"])
        rates = d["rates"]
        if isinstance(rates, dict):
            ties = RateTies(rates["ties"]["index"], rates["ties"]["coef"])
            rp = RateParams(rates["free"], ties)
        else:
            rp = RateParams.from_matrix(rates)
        sys = ReactionSystem(deltas, laws, rp, tuple(d.get("species", ())), tuple(d.get("reactions", ())))
        rm = RegimeModel.constant(d["generator"])
        init = d["initial"]
        state = SystemState(float(init.get("t", 0.0)), init["X"], int(init.get("M", 1)))
        pr = d.get("prior", {"shape": 1.0, "rate": 1.0})
        prior = SufficientStats.prior(sys.ties, pr["shape"], pr["rate"])
        return ModelBundle(sys, rm, state, prior, float(d.get("horizon", 1.0)))
    except KeyError as e:
        raise ConfigurationError(f"model descriptor is missing {e}") from None
    except (ModelArgumentError, TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid model descriptor: {e}") from None


def model_descriptor(bundle: ModelBundle):
    """Descriptor dict for presets; general models are not re-serialized."""
    if bundle.sis is None:
        raise ConfigurationError("only preset models can be written back")
    return {"preset": "sis", "overrides": bundle.sis.to_dict(), "horizon": bundle.horizon}


def load_theta(src, system: ReactionSystem) -> RateParams:
    """Rates from ``{"theta": [[...]]}`` (reaction x regime) or ``{"free": [...]}``."""
    d = _load_json(src)
    try:
        if "free" in d:
            return RateParams(d["free"], system.ties)
        theta = np.asarray(d["theta"], dtype=float)
    except KeyError:
        raise ConfigurationError("theta file needs 'theta' or 'free'") from None
    except ModelArgumentError as e:
        raise ConfigurationError(str(e)) from None
    if theta.shape != (system.qbar, system.mbar):
        raise ConfigurationError(f"theta must be {system.qbar} x {system.mbar}")
    return RateParams.from_matrix(theta)


def load_rules(src):
    from .policy import PolicyRule

    d = _load_json(src)
    items = d.get("rules") if isinstance(d, dict) else d
    if not isinstance(items, list) or not items:
        raise ConfigurationError("rules file must hold a non-empty list")
    try:
        return [PolicyRule.from_dict(r) for r in items]
    except (TypeError, ModelArgumentError) as e:
        raise ConfigurationError(f"invalid rule: {e}") from None


def write_rows(dest, header, rows):
    Path(dest).parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def read_rows(src):
    with open(src, newline="") as fh:
        return list(csv.DictReader(fh))
