"""Command line experiment runner.

``ising-analytic KIND --config FILE [--seed S] [--out DIR] [--workers N]``

The config is one YAML or JSON file validated against the schema of its kind.
Each run writes ``KIND.csv`` (headered rows) and ``KIND.json`` (the config as
given, estimates with standard errors, fits and invariant checks).  Exit
status: 0 success, 2 configuration error, 3 invariant violation.
"""
import argparse
import copy
import csv
import io
import json
import math
import os
import sys

import jsonschema
import numpy as np
import yaml

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3

KINDS = ("sup-decay", "kupd-tail", "domination", "polymer-identity", "pressure-series",
         "fk-relax", "crossing", "oracle")

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_COMMON = {
    "kind": {"enum": list(KINDS)},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
    "replicas": _pos_int,
    "workers": _pos_int,
    "out": {"type": "string"},
    "d": {"type": "integer", "minimum": 1, "maximum": 3},
    "N": {"type": "integer", "minimum": 0},
    "L": {"type": "integer", "minimum": 0},
    "beta": {"type": "number", "minimum": 0},
    "h": _num,
    "t_max": {"type": "number", "exclusiveMinimum": 0},
    "eps": {"type": "number", "exclusiveMinimum": 0},
}
_EXTRA = {
    "sup-decay": ({"t_grid": {"type": "array", "items": {"type": "number", "minimum": 0},
                              "minItems": 2},
                   "site": {"type": "integer", "minimum": 0}},
                  ["d", "N", "beta", "h", "replicas", "t_grid"]),
    "kupd-tail": ({"V": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                   "horizon": _pos_int},
                  ["d", "N", "L", "beta", "h", "replicas"]),
    "domination": ({"horizon": _pos_int, "min_class": _pos_int},
                   ["d", "N", "L", "beta", "h", "replicas", "horizon"]),
    "polymer-identity": ({"n_sites": {"type": "integer", "minimum": 1, "maximum": 6},
                          "n_functions": {"type": "integer", "minimum": 1, "maximum": 8}},
                         ["replicas"]),
    "pressure-series": ({"z": {"type": "array", "items": _num, "minItems": 1},
                         "n_max": _pos_int, "max_size": _pos_int},
                        ["d", "N", "L", "beta", "h", "z", "replicas"]),
    "fk-relax": ({"Ns": {"type": "array", "items": {"type": "integer", "minimum": 0},
                         "minItems": 1},
                  "mc_Ns": {"type": "array", "items": {"type": "integer", "minimum": 1}}},
                 ["d", "beta", "h", "Ns"]),
    "crossing": ({"Ns": {"type": "array", "items": {"type": "integer", "minimum": 1},
                         "minItems": 1},
                  "K": _pos_int,
                  "method": {"enum": ["direct", "rejection", "reweight", "both"]}},
                 ["d", "beta", "h", "Ns", "K", "replicas"]),
    "oracle": ({"geometry": {"enum": ["torus", "box", "ring"]},
                "bc": {"enum": ["free", "plus", "minus"]},
                "n": {"type": "integer", "minimum": 3}},
               ["geometry", "beta", "h"]),
}


def config_schema(kind):
    props, req = _EXTRA[kind]
    return {"type": "object", "properties": {**_COMMON, **props},
            "required": ["kind", *req], "additionalProperties": False}


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["kind", "config", "results", "invariants", "ok"],
    "properties": {"kind": {"enum": list(KINDS)}, "config": {"type": "object"},
                   "results": {"type": "object"}, "invariants": {"type": "object"},
                   "ok": {"type": "boolean"}},
}


class ConfigError(ValueError):
    pass


def load_config(path):
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return data


def validate(cfg):
    kind = cfg.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown or missing kind {kind!r}; expected one of {KINDS}")
    v = jsonschema.Draft202012Validator(config_schema(kind))
    errs = sorted(v.iter_errors(cfg), key=lambda e: list(e.path))
    if errs:
        raise ConfigError("; ".join(f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}"
                                    for e in errs))
    return cfg


def _clean(x):
    """JSON-safe, deterministic representation of results."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, complex):
        return [_clean(x.real), _clean(x.imag)]
    return x


def write_csv(path, rows):
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


# ---------------------------------------------------------------- experiments

def _params(cfg):
    from .glauber import ModelParams

    return ModelParams(float(cfg["beta"]), float(cfg["h"]))


def _torus(cfg):
    from .lattice import TorusGeom

    return TorusGeom(cfg["d"], cfg["N"])


def run_sup_decay(cfg):
    from .infoperc import estimate_sup_decay

    fit = estimate_sup_decay(_params(cfg), _torus(cfg), cfg["t_grid"], cfg["replicas"],
                             cfg["seed"], site=cfg.get("site", 0), t_max=cfg.get("t_max"))
    return fit.rows(), fit.summary(), {}


def run_kupd_tail(cfg):
    from .coarsegrain import kupd_coarse_containment
    from .lattice import CoarseLattice

    coarse = CoarseLattice(_torus(cfg), cfg["L"])
    rep = kupd_coarse_containment(_params(cfg), coarse, cfg.get("V", [0]), cfg["replicas"],
                                  cfg["seed"], horizon=cfg.get("horizon"), eps=cfg.get("eps"),
                                  t_max=cfg.get("t_max", 200.0))
    inv = {"inclusion": rep.violations == 0 and rep.coarse_violations == 0,
           "cardinality": rep.card_flags == 0}
    return rep.tail.rows(), rep.summary(), inv


def run_domination(cfg):
    from .coarsegrain import domination_check
    from .lattice import CoarseLattice

    coarse = CoarseLattice(_torus(cfg), cfg["L"])
    rep = domination_check(_params(cfg), coarse, cfg["horizon"], cfg["replicas"], cfg["seed"],
                           eps=cfg.get("eps"), min_class=cfg.get("min_class", 50))
    rows = [{"M": int(m), "painted": float(a), "painted_se": float(b), "bernoulli": float(c),
             "bernoulli_se": float(e)}
            for m, a, b, c, e in zip(rep.M, rep.painted_tail, rep.painted_se, rep.bern_tail,
                                     rep.bern_se)]
    return rows, rep.summary(), {"domination": rep.passes}


def run_polymer_identity(cfg):
    from . import polymer

    rng = np.random.default_rng(cfg["seed"])
    n = cfg.get("n_sites", 5)
    rows = []
    for i in range(cfg["replicas"]):
        phi = (polymer.random_reach_encoding if i % 2 else polymer.random_block_encoding)(n, rng)
        k = cfg.get("n_functions", 3)
        fs = [polymer.random_local_function(
            rng.choice(n, size=int(rng.integers(1, min(3, n) + 1)), replace=False), rng)
            for _ in range(k)]
        r = polymer.verify_polymer_identity(phi, fs)
        rows.append({"instance": i, "lhs_re": r.lhs.real, "lhs_im": r.lhs.imag,
                     "rhs_re": r.rhs.real, "rhs_im": r.rhs.imag, "residual": r.residual})
    worst = max(r["residual"] for r in rows)
    return rows, {"max_residual": worst, "n_instances": len(rows)}, \
        {"polymer_identity": worst < 1e-10}


def _exact_pressure_shift(cfg, z):
    """Finite-volume ``(log Z(beta + z) - log Z(beta)) / |sites|`` when an oracle applies."""
    from .glauber import ModelParams
    from .oracle import ENUM_CAP, exact_partition, ring_log_z

    geom = _torus(cfg)
    b, h = float(cfg["beta"]), float(cfg["h"])
    if cfg["d"] == 1:
        n = geom.n_sites
        return (ring_log_z(n, ModelParams(b + z, h)).value
                - ring_log_z(n, ModelParams(b, h)).value) / n
    if geom.n_sites <= ENUM_CAP and geom.side >= 4:
        return (exact_partition(geom, ModelParams(b + z, h)).value
                - exact_partition(geom, ModelParams(b, h)).value) / geom.n_sites
    return math.nan


def run_pressure_series(cfg):
    from .lattice import CoarseLattice
    from .polymer import pressure_perturbation, sample_phi_L

    coarse = CoarseLattice(_torus(cfg), cfg["L"])
    params = _params(cfg)
    ph = sample_phi_L(params, coarse, cfg["replicas"], cfg["seed"], cfg.get("t_max", 200.0))
    rows = []
    for z in cfg["z"]:
        e = pressure_perturbation(params, float(z), coarse, cfg.get("n_max", 3), None, None,
                                  max_size=cfg.get("max_size"), samples=ph)
        rows.append({"z": float(z), "estimate": e.value, "se": e.se, "direct": e.direct,
                     "direct_se": e.direct_se, "first_order": e.first_order,
                     "first_order_se": e.first_order_se,
                     "exact": _exact_pressure_shift(cfg, float(z))})
    e0 = pressure_perturbation(params, 0.0, coarse, 1, None, None, samples=ph)
    summ = {"energy_density": e0.energy_density, "energy_density_se": e0.energy_density_se,
            "n_samples": e0.n_samples, "n_censored": e0.n_censored}
    agree = all(not math.isfinite(r["exact"]) or abs(r["estimate"] - r["exact"]) <= 5 * r["se"]
                + 1e-12 for r in rows)
    return rows, summ, {"series_vs_exact": agree}


def run_fk_relax(cfg):
    from .fkfield import relax_gap

    tab = relax_gap(cfg["Ns"], _params(cfg), d=cfg["d"], mc_Ns=cfg.get("mc_Ns", ()),
                    replicas=cfg.get("replicas", 20000), seed=cfg.get("seed", 0),
                    t_max=cfg.get("t_max", 400.0))
    summ = {"rate": tab.rate, "rate_se": tab.rate_se, "ci": list(tab.ci)}
    return tab.rows(), summ, {"fkg_ordering": True}


def run_crossing(cfg):
    from .fkfield import crossing_pair, crossing_prob

    params = _params(cfg)
    method = cfg.get("method", "direct")
    rows = []
    agree = True
    for i, N in enumerate(cfg["Ns"]):
        seed = cfg["seed"] + 1000 * i
        if method == "both":
            ests = list(crossing_pair(N, cfg["K"], params, cfg["replicas"], seed, cfg["d"],
                                      cfg.get("t_max", 400.0)))
            a, b = ests
            if not a.collapsed:
                agree &= abs(a.value - b.value) <= 3 * math.hypot(a.se, b.se)
        else:
            ests = [crossing_prob(N, cfg["K"], params, cfg["replicas"], seed, cfg["d"], method,
                                  cfg.get("t_max", 400.0))]
        for e in ests:
            rows.append({"N": N, "K": e.K, "method": e.method, "estimate": e.value, "se": e.se,
                         "n_used": e.n_used, "n_total": e.n_total, "collapsed": e.collapsed})
    return rows, {"n_rows": len(rows)}, {"estimators_agree": bool(agree)}


def run_oracle(cfg):
    from .lattice import BoxGeom, TorusGeom
    from .oracle import enumerate_ising, ring_log_z

    params = _params(cfg)
    geo = cfg["geometry"]
    if geo == "ring":
        n = cfg.get("n", 4)
        val = ring_log_z(n, params).value
        e = enumerate_ising(TorusGeom(1, n // 2), params) if n % 2 == 0 and n <= 24 else None
        row = {"geometry": "ring", "n": n, "log_z": val,
               "log_z_enumeration": e.log_z if e else math.nan}
        inv = {"methods_agree": e is None or abs(e.log_z - val) < 1e-10}
        return [row], dict(row), inv
    g = TorusGeom(cfg["d"], cfg["N"]) if geo == "torus" else \
        BoxGeom(cfg["d"], cfg["N"], cfg.get("bc", "free"))
    e = enumerate_ising(g, params)
    origin = g.origin if geo == "box" else 0
    row = {"geometry": geo, "n_sites": g.n_sites, "log_z": e.log_z,
           "magnetization_origin": float(e.magnetization[origin]),
           "energy_density": e.bond_sum / g.n_sites}
    return [row], dict(row), {}


RUNNERS = {"sup-decay": run_sup_decay, "kupd-tail": run_kupd_tail,
           "domination": run_domination, "polymer-identity": run_polymer_identity,
           "pressure-series": run_pressure_series, "fk-relax": run_fk_relax,
           "crossing": run_crossing, "oracle": run_oracle}


def run(cfg, out_dir):
    """Run one validated config; returns ``(exit status, summary dict)``."""
    from .fkfield import InvariantViolation

    given = copy.deepcopy(cfg)
    cfg = dict(cfg)
    cfg.setdefault("seed", 0)
    kind = cfg["kind"]
    os.makedirs(out_dir, exist_ok=True)
    try:
        rows, results, inv = RUNNERS[kind](cfg)
        violated = [k for k, v in inv.items() if not v]
    except InvariantViolation as exc:
        rows, results, inv, violated = [], {"error": str(exc)}, {"runtime": False}, ["runtime"]
    summary = {"kind": kind, "config": given, "results": _clean(results),
               "invariants": _clean(inv), "ok": not violated}
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    write_csv(os.path.join(out_dir, f"{kind}.csv"), rows)
    with open(os.path.join(out_dir, f"{kind}.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if violated:
        print(f"invariant violated: {', '.join(violated)}", file=sys.stderr)
        return EXIT_INVARIANT, summary
    return EXIT_OK, summary


def _report(summary, out_dir):
    # estimates live in the files together with their errors
    kind = summary["kind"]
    print(f"wrote {os.path.join(out_dir, kind + '.csv')} and "
          f"{os.path.join(out_dir, kind + '.json')}; ok={summary['ok']}")


def build_parser():
    p = argparse.ArgumentParser(prog="ising-analytic", description=__doc__.splitlines()[0])
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="results")
    p.add_argument("--workers", type=int)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg.setdefault("kind", args.kind)
        if cfg["kind"] != args.kind:
            raise ConfigError(f"config kind {cfg['kind']!r} does not match subcommand "
                              f"{args.kind!r}")
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.workers is not None:
            cfg["workers"] = args.workers
        validate(cfg)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = cfg.get("out", args.out) if args.out == "results" else args.out
    status, summary = run(cfg, out_dir)
    _report(summary, out_dir)
    return status


if __name__ == "__main__":
    sys.exit(main())
