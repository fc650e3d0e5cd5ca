"""Command-line entry point: cantor, poset, spectrum, wegner, msa."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

from . import __version__
from .errors import ConfigError, LabError, UsageError

SUBCOMMANDS = ("cantor", "poset", "spectrum", "wegner", "msa")
GLOBAL_KEYS = {"seed": 0, "out": None, "format": "csv", "threads": None}

# per-subcommand defaults; None marks a required parameter
DEFAULTS: dict[str, dict[str, Any]] = {
    "cantor": {"beta": None, "l1": None, "depth": None, "emit": "intervals", "samples": None, "prec": 256},
    "poset": {"k": None, "n": None, "emit": "ranks", "seeds": 1000, "max_exhaustive": 10**5},
    "spectrum": {
        "dim": None,
        "side": None,
        "mesh": None,
        "config_file": None,
        "energy": None,
        "window": None,
        "emit": "eigs",
        "m": 0.1,
        "eps": 0.05,
        "source": None,
    },
    "wegner": {
        "beta": None,
        "l1": None,
        "eps": None,
        "rho": None,
        "dim": 1,
        "side": None,
        "free_sites_file": None,
        "e0": None,
        "c1": None,
        "c2": None,
        "c3": None,
        "trials": 10**5,
        "emit": "estimate",
        "mesh": 0.25,
        "u": 1.0,
        "branch": 0,
        "offset": 0.5,
        "kappa": 0.05,
        "kappa_prime": 0.05,
        "fixed": "zero",
        "allow_sparse": False,
    },
    "msa": {"beta": None, "l1": None, "eps": 0.05, "scales": None},
}

# parameters whose requirement depends on the emit mode
CONDITIONAL = {
    ("spectrum", "resolvent"): ("energy",),
    ("spectrum", "green"): ("energy",),
    ("spectrum", "goodbox"): ("energy",),
    ("wegner", "estimate"): ("e0", "c1", "c2", "c3"),
    ("wegner", "separation"): ("e0", "c1", "c2", "c3"),
    ("wegner", "classes"): ("e0", "c1", "c2", "c3"),
}
OPTIONAL_NONE = {("cantor", "depth"), ("cantor", "samples"), ("spectrum", "config_file"), ("spectrum", "energy"),
                 ("spectrum", "window"), ("spectrum", "source"), ("wegner", "rho"), ("wegner", "free_sites_file"),
                 ("wegner", "e0"), ("wegner", "c1"), ("wegner", "c2"), ("wegner", "c3")}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = _Parser(add_help=False, argument_default=S)
    common.add_argument("--seed", type=int, help="64-bit seed")
    common.add_argument("--out", help="output path (stdout if omitted)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--threads", type=int, help="worker threads (fallback: CAL_THREADS)")
    common.add_argument("--config", help="JSON file with parameters; flags override it")

    p = _Parser(prog="cantor-anderson", description=__doc__, parents=[common], argument_default=S)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", parser_class=_Parser)

    c = sub.add_parser("cantor", parents=[common], argument_default=S, help="Cantor set and measure")
    c.add_argument("--beta", type=float)
    c.add_argument("--l1", type=float)
    c.add_argument("--depth", type=int)
    c.add_argument("--emit", choices=("intervals", "gaps", "cdf", "modulus", "samples"))
    c.add_argument("--samples", type=int, help="grid points (cdf, modulus) or draws (samples)")
    c.add_argument("--prec", type=int, help="working precision in bits")

    q = sub.add_parser("poset", parents=[common], argument_default=S, help="rank numbers and antichain bounds")
    q.add_argument("--k", type=int)
    q.add_argument("--n", type=int)
    q.add_argument("--emit", choices=("ranks", "bound", "sweep"))
    q.add_argument("--seeds", type=int, help="random antichains per sweep row")
    q.add_argument("--max-exhaustive", dest="max_exhaustive", type=int)

    s = sub.add_parser("spectrum", parents=[common], argument_default=S, help="finite-volume spectra")
    s.add_argument("--dim", type=int)
    s.add_argument("--side", type=float)
    s.add_argument("--mesh", type=float)
    s.add_argument("--config-file", dest="config_file")
    s.add_argument("--energy", type=float)
    s.add_argument("--window", type=str, help="lo,hi")
    s.add_argument("--emit", choices=("eigs", "resolvent", "green", "goodbox"))
    s.add_argument("--m", type=float, help="decay rate for goodbox")
    s.add_argument("--eps", type=float, help="exponent loss for goodbox")
    s.add_argument("--source", type=str, help="source site for green, comma separated")

    w = sub.add_parser("wegner", parents=[common], argument_default=S, help="Wegner experiment")
    for name in ("beta", "l1", "eps", "rho", "side", "e0", "c1", "c2", "c3", "mesh", "u", "offset", "kappa"):
        w.add_argument(f"--{name}", type=float)
    w.add_argument("--kappa-prime", dest="kappa_prime", type=float)
    w.add_argument("--dim", type=int)
    w.add_argument("--free-sites-file", dest="free_sites_file")
    w.add_argument("--trials", type=int)
    w.add_argument("--branch", type=int)
    w.add_argument("--fixed", choices=("zero", "random"), help="classes on the fixed sites")
    w.add_argument("--allow-sparse", dest="allow_sparse", action="store_true", help="skip the density gate")
    w.add_argument("--emit", choices=("estimate", "separation", "classes"))

    m = sub.add_parser("msa", parents=[common], argument_default=S, help="scale schedule table")
    m.add_argument("--beta", type=float)
    m.add_argument("--l1", type=float)
    m.add_argument("--eps", type=float)
    m.add_argument("--scales", type=int)
    return p


# -- configuration -----------------------------------------------------------------


@dataclass
class ExperimentSpec:
    subcommand: str
    parameters: dict
    seed: int
    out: Optional[str]
    format: str
    threads: int


def load_config(path: str) -> dict:
    """JSON object of parameters; keys may use dashes or underscores."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path!r} must hold a JSON object")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve(argv) -> ExperimentSpec:
    ns = vars(build_parser().parse_args(argv))
    cmd = ns.pop("subcommand", None)
    if cmd is None:
        raise UsageError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
    known = dict(GLOBAL_KEYS)
    known.update(DEFAULTS[cmd])
    merged = dict(known)
    cfg_path = ns.pop("config", None)
    if cfg_path is not None:
        file_vals = load_config(cfg_path)
        for key in file_vals:
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in {cfg_path} for subcommand {cmd!r}")
        merged.update(file_vals)
    merged.update(ns)
    emit = merged.get("emit")
    required = [k for k, v in DEFAULTS[cmd].items() if v is None and (cmd, k) not in OPTIONAL_NONE]
    required += list(CONDITIONAL.get((cmd, emit), ()))
    missing = [k for k in required if merged.get(k) is None]
    if missing:
        raise UsageError(f"{cmd}: missing required " + ", ".join("--" + k.replace("_", "-") for k in missing))
    threads = merged.pop("threads")
    if threads is None:
        env = os.environ.get("CAL_THREADS")
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"CAL_THREADS={env!r} is not an integer") from None
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    if merged["format"] not in ("csv", "json"):
        raise ConfigError(f"format must be csv or json, got {merged['format']!r}")
    seed = int(merged.pop("seed"))
    if not 0 <= seed < 2**64:
        raise UsageError("seed must be a 64-bit unsigned integer")
    out, fmt = merged.pop("out"), merged.pop("format")
    return ExperimentSpec(cmd, merged, seed, out, fmt, threads)


# -- results --------------------------------------------------------------------


@dataclass
class Table:
    columns: list
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _num(x):
    """JSON/CSV friendly scalar."""
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        x = float(x)
    if isinstance(x, float):
        return x if math.isfinite(x) else repr(x)
    if hasattr(x, "_mpf_"):
        return x.context.nstr(x, 25)
    if isinstance(x, (tuple, list)):
        return [_num(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _num(v) for k, v in x.items()}
    return x


def run_cantor(p: dict, seed: int, threads: int) -> Table:
    from .cantor import CantorParams, CantorSet

    emit = p["emit"]
    depth = p["depth"]
    if depth is None:
        depth = 6 if emit == "modulus" else 1
    cs = CantorSet(CantorParams(p["beta"], p["l1"], depth), prec=p["prec"])
    if emit == "intervals":
        t = Table(["generation", "address", "left", "right", "log_length"])
        for iv in cs.build_generation(depth):
            t.rows.append([iv.generation, iv.address, _num(iv.left), _num(iv.right), iv.log_length])
        return t
    if emit == "gaps":
        t = Table(["generation", "gap", "log_gap"])
        for g in cs.gaps():
            t.rows.append([g.generation, _num(cs.gap[g.generation]), g.log_gap])
        return t
    if emit == "cdf":
        n = p["samples"] or 101
        t = Table(["x", "F"])
        for x in np.linspace(0.0, 1.0, n):
            t.rows.append([float(x), float(cs.cdf(float(x)))])
        return t
    if emit == "modulus":
        t = Table(["eps", "bound", "empirical", "gap_generation"])
        for eps, bound, emp in cs.modulus_sweep(p["samples"] or 50):
            t.rows.append([float(eps), float(bound), float(emp), cs.gap_generation(eps)])
        return t
    n = p["samples"] or 1000
    idx, vals = cs.sample_array(depth, n, np.random.default_rng(seed))
    t = Table(["address", "value"])
    t.rows = [[format(int(i), f"0{depth}b"), float(v)] for i, v in zip(idx, vals)]
    return t


def run_poset(p: dict, seed: int, threads: int) -> Table:
    from .poset import antichain_probability_bound, brute_force_max_antichain, lym_sum, random_antichain, rank_numbers

    K, n, emit = p["k"], p["n"], p["emit"]
    if emit == "ranks":
        prof = rank_numbers(K, n)
        return Table(["r", "N_r"], [[r, c] for r, c in prof.items()], {"K": K, "n": n, "total": prof.total})
    if emit == "bound":
        b = antichain_probability_bound(K, n)
        return Table(["K", "n", "exact_bound", "asymptotic_bound", "ratio"], [[K, n, float(b.exact), b.asymptotic, b.ratio]])
    t = Table(["K", "n", "exact_bound", "asymptotic_bound", "ratio", "max_antichain", "max_rank", "lym_max"])
    for m in range(1, n + 1):
        b = antichain_probability_bound(K, m)
        prof = rank_numbers(K, m)
        size = brute_force_max_antichain(K, m).size if K**m <= p["max_exhaustive"] else None
        lym = None
        if K**m <= 4096 and p["seeds"] > 0:
            lym = max(float(lym_sum(random_antichain(K, m, seed + i), prof)) for i in range(p["seeds"]))
        t.rows.append([K, m, float(b.exact), b.asymptotic, b.ratio, size, prof.max_count, lym])
    return t


def _parse_site(v):
    if isinstance(v, (int, float)):
        return (int(v),)
    if isinstance(v, str):
        return tuple(int(x) for x in v.split(","))
    return tuple(int(x) for x in v)


SPECTRUM_FILE_KEYS = {"center", "default_value", "values", "free_sites", "free_values", "site"}


def _spectrum_setup(p: dict):
    from .hamiltonian import BoxSpec, Configuration, SingleSite

    spec = {}
    if p["config_file"]:
        try:
            with open(p["config_file"]) as fh:
                spec = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load {p['config_file']!r}: {exc}") from exc
        if not isinstance(spec, dict):
            raise ConfigError("configuration file must hold a JSON object")
        bad = set(spec) - SPECTRUM_FILE_KEYS
        if bad:
            raise ConfigError(f"unknown key {sorted(bad)[0]!r} in {p['config_file']}")
    dim = p["dim"]
    center = tuple(spec.get("center", [0.0] * dim))
    box = BoxSpec(dim, center, p["side"], p["mesh"])
    site_kw = spec.get("site", {})
    try:
        site = SingleSite(**site_kw)
    except TypeError as exc:
        raise ConfigError(f"bad site parameters: {exc}") from exc
    free = [_parse_site(z) for z in spec.get("free_sites", [])]
    fv = spec.get("free_values", [])
    if isinstance(fv, dict):
        fv = {_parse_site(k): v for k, v in fv.items()}
    else:
        fv = dict(zip(sorted(free), fv))
    values = {z: spec.get("default_value", 0.0) for z in box.sites if z not in set(free)}
    raw = spec.get("values", {})
    items = raw.items() if isinstance(raw, dict) else raw
    for z, v in items:
        z = _parse_site(z)
        if z not in values:
            raise ConfigError(f"value given for {z}, which is not a fixed site of the box")
        values[z] = v
    return box, site, Configuration(values, free, fv)


def run_spectrum(p: dict, seed: int, threads: int) -> Table:
    from .hamiltonian import FreeProbePolicy, assemble, green_decay, is_good_box, resolvent_norm

    box, site, config = _spectrum_setup(p)
    op = assemble(box, site, config)
    emit = p["emit"]
    if emit == "eigs":
        if p["window"]:
            lo, hi = (float(v) for v in p["window"].split(","))
        else:
            lo, hi = -math.inf, math.inf
        if op.dim > 4000:
            if p["energy"] is None:
                raise UsageError("large operators need --energy for a shift-invert window")
            lam = op.eigenpairs_near(p["energy"], k=20).eigenvalues
        else:
            lam = op.spectrum().eigenvalues
        return Table(["index", "value"], [[j, float(v)] for j, v in enumerate(lam) if lo <= v <= hi])
    E = p["energy"]
    if emit == "resolvent":
        return Table(["energy", "norm"], [[E, resolvent_norm(op, E)]])
    if emit == "green":
        sites = box.sites
        x = _parse_site(p["source"]) if p["source"] else sites[0]
        t = Table(["dist", "lognorm", "site"])
        for y in sites:
            g = green_decay(op, E, x, y)
            t.rows.append([math.dist(x, y), math.log(g) if g > 0 else -math.inf, ",".join(map(str, y))])
        return t
    v = is_good_box(box, site, config, E, p["m"], p["eps"], FreeProbePolicy(seed=seed))
    d = asdict(v)
    return Table(list(d), [[_num(d[k]) for k in d]])


def _wegner_setup(p: dict, seed: int):
    from .cantor import CantorParams
    from .hamiltonian import BoxSpec, SingleSite
    from .wegner import BConfSet, ScaleSchedule

    center = (0.5,) * p["dim"]
    box = BoxSpec(p["dim"], center, p["side"], p["mesh"])
    if p["free_sites_file"]:
        try:
            with open(p["free_sites_file"]) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load {p['free_sites_file']!r}: {exc}") from exc
        if isinstance(raw, dict):
            raw = raw.get("free_sites")
        if not isinstance(raw, list):
            raise ConfigError("free sites file must hold a list of sites")
        S = [_parse_site(z) for z in raw]
    else:
        S = list(box.sites)
    probe = CantorParams(p["beta"], p["l1"], 1)
    k = ScaleSchedule(probe, p["eps"]).resolution_of(box.side).k
    schedule = ScaleSchedule(CantorParams(p["beta"], p["l1"], k), p["eps"])
    rng = np.random.default_rng([seed, 1]) if p["fixed"] == "random" else None
    bconf = BConfSet.build(box, k, S, rng=rng)
    return box, SingleSite(p["u"], p["u"]), bconf, schedule


def run_wegner(p: dict, seed: int, threads: int) -> Table:
    from .wegner import BranchEvaluator, WegnerExperimentConfig, cover_separation_scan, energy_table, wegner_monte_carlo

    box, site, bconf, schedule = _wegner_setup(p, seed)
    cfg = WegnerExperimentConfig(
        L=box.side, E0=p["e0"], c1=p["c1"], c2=p["c2"], c3=p["c3"], beta=p["beta"], eps=p["eps"], rho=p["rho"],
        trials=p["trials"], seed=seed, branch=p["branch"], offset=p["offset"], kappa=p["kappa"],
        kappa_prime=p["kappa_prime"], require_dense=not p["allow_sparse"],
    )
    ev = BranchEvaluator(box, site, bconf, schedule.cantor, cfg.branch, cfg.offset)
    summary = {"resolution": bconf.resolution, "K": bconf.K, "free_sites": [list(z) for z in bconf.free_order], "experiment": _num(cfg.echo())}
    if p["emit"] == "separation":
        table = energy_table(ev, threads)
        K, n = bconf.K, len(bconf.free_sites)
        T = table.reshape((K,) * n)
        t = Table(["site", "covers", "min_separation", "failed", "threshold"], summary=summary)
        for i, z in enumerate(bconf.free_order):
            diff = np.diff(T, axis=i)
            t.rows.append([",".join(map(str, z)), diff.size, float(diff.min()), int((diff < cfg.D_min).sum()), cfg.D_min])
        scan = cover_separation_scan(table, K, n, cfg.D_min)
        summary["all_covers_pass"] = scan.n_failed == 0
        return t
    est = wegner_monte_carlo(box, site, bconf, cfg, evaluator=ev, threads=threads)
    if p["emit"] == "classes":
        E = ev.energies(np.array(est.hit_classes)) if est.hit_classes else []
        t = Table(["class", "energy"], summary=summary)
        t.rows = [[" ".join(map(str, c)), float(e)] for c, e in zip(est.hit_classes, E)]
        return t
    d = est.as_dict()
    d.pop("hit_classes")
    return Table(list(d), [[_num(d[k]) for k in d]], summary)


def run_msa(p: dict, seed: int, threads: int) -> Table:
    from .cantor import CantorParams
    from .wegner import ScaleSchedule

    sch = ScaleSchedule(CantorParams(p["beta"], p["l1"], 1), p["eps"])
    rows = sch.table(p["scales"])
    cols = list(rows[0]) if rows else ["k"]
    return Table(cols, [[r[c] for c in cols] for r in rows], {"eps_prime": sch.eps_prime})


RUNNERS = {"cantor": run_cantor, "poset": run_poset, "spectrum": run_spectrum, "wegner": run_wegner, "msa": run_msa}


# -- output ----------------------------------------------------------------------


def render(spec: ExperimentSpec, manifest: dict, table: Optional[Table]) -> str:
    if spec.format == "json":
        body = {"manifest": manifest}
        if table is not None:
            body["result"] = {
                "columns": table.columns,
                "rows": [[_num(v) for v in r] for r in table.rows],
                "summary": _num(table.summary),
            }
        return json.dumps(body, indent=1, sort_keys=False) + "\n"
    buf = io.StringIO()
    buf.write("# manifest " + json.dumps(manifest, sort_keys=True) + "\n")
    if table is not None:
        if table.summary:
            buf.write("# summary " + json.dumps(_num(table.summary), sort_keys=True) + "\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(table.columns)
        for r in table.rows:
            wr.writerow(["" if v is None else _num(v) for v in r])
    return buf.getvalue()


def body_of(text: str, fmt: str) -> str:
    """Output with the manifest removed, for determinism comparisons."""
    if fmt == "json":
        d = json.loads(text)
        d.pop("manifest", None)
        return json.dumps(d, sort_keys=True)
    return "".join(line + "\n" for line in text.splitlines() if not line.startswith("# manifest"))


def write_atomic(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def execute(spec: ExperimentSpec) -> tuple[dict, Optional[Table], Optional[Exception]]:
    t0 = time.perf_counter()
    err = None
    table = None
    try:
        table = RUNNERS[spec.subcommand](spec.parameters, spec.seed, spec.threads)
        status = "ok"
    except (LabError, ValueError) as exc:
        err = exc
        status = f"{type(exc).__name__}: {exc}"
    manifest = {
        "artifact": "cantor_anderson",
        "version": __version__,
        "subcommand": spec.subcommand,
        "parameters": _num(spec.parameters),
        "seed": spec.seed,
        "threads": spec.threads,
        "format": spec.format,
        "wall_time_s": round(time.perf_counter() - t0, 6),
        "status": [{"op": spec.subcommand, "status": status}],
    }
    return manifest, table, err


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        spec = resolve(argv)
    except UsageError as exc:
        print(f"UsageError: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"ConfigError: {exc}", file=sys.stderr)
        return 2
    manifest, table, err = execute(spec)
    text = render(spec, manifest, table)
    if spec.out:
        write_atomic(spec.out, text)
    else:
        sys.stdout.write(text)
    if err is not None:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
