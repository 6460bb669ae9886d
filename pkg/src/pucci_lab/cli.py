"""Command-line front end: ``pucci-lab {exponent,radial,perturbed,table}``.

Every run writes a JSON summary ``<out>/<command>.json`` with the schema
``{params, result, diagnostics: {residual, iters}, version}`` plus CSV/text data
files that carry the same parameters in a ``#`` header line. Summaries are
cached under ``<out>/.cache`` by a hash of the canonical parameters.

Exit codes: 0 success, 2 configuration error, 3 solver divergence,
4 supercritical exponent (no positive solution).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .domain import (SHAPES, PerturbedBall, continuation_in_epsilon, homotopy_in_s,
                     write_solution)
from .errors import (ConfigError, DivergenceError, GridError, HomotopyError, IntegrationError,
                     InvalidBracketError, SupercriticalError)
from .nondegeneracy import mode_sweep, radial_nondegeneracy
from .operators import EllipticityPair, sobolev_exponent
from .radial import (CLASSIFY_RMAX, DIRICHLET_RMAX, RadialProblem, critical_exponent,
                     default_bracket, dirichlet_radial_solution, expand_bracket,
                     profile_residual)

log = logging.getLogger("pucci_lab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SUPERCRITICAL = 0, 2, 3, 4
KINDS = ("q+", "q-", "m+", "m-")

DEFAULTS = {
    "exponent": {"lambda": 1.0, "Lambda": 1.0, "dim": 3, "kind": "m+", "p_lo": None,
                 "p_hi": None, "tol": 1e-3, "rmax": CLASSIFY_RMAX},
    "radial": {"lambda": 1.0, "Lambda": 1.0, "dim": 3, "kind": "q+", "p": None, "tol": 1e-12,
               "rmax": DIRICHLET_RMAX, "kmax": 6},
    "perturbed": {"lambda": 1.0, "Lambda": 2.0, "dim": 3, "kind": "q+", "p": 4.0,
                  "eps": [0.1, 0.05, 0.025], "shape": "cos2", "nr": 64, "ntheta": 32,
                  "tol": 1e-10, "method": "continuation", "steps": 8},
    "table": {"lambda": [1.0], "Lambda": [2.0], "dim": [3, 4, 5], "kind": ["m+", "m-"],
              "tol": 1e-3, "rmax": CLASSIFY_RMAX, "jobs": None},
}
# keys that do not change results and so stay out of the cache key
RUNTIME_KEYS = {"out", "config", "no_cache", "jobs", "verbose"}


# --------------------------------------------------------------------------
# configuration


def _is_resolution(n):
    n = int(n)
    return n >= 16 and n % 16 == 0 and (n // 16) & (n // 16 - 1) == 0


@dataclass
class RunConfig:
    command: str
    params: dict
    out: Path = Path("pucci_out")
    use_cache: bool = True
    jobs: int | None = None
    extra: dict = field(default_factory=dict)

    def validate(self):
        p = self.params
        lams = np.atleast_1d(p["lambda"]).astype(float)
        Lams = np.atleast_1d(p["Lambda"]).astype(float)
        if np.any(lams <= 0) or np.any(Lams <= 0):
            raise ConfigError("ellipticity constants must be positive")
        if self.command != "table" and lams[0] > Lams[0]:
            raise ConfigError(f"need lambda <= Lambda, got {lams[0]} > {Lams[0]}")
        for kind in np.atleast_1d(p["kind"]):
            if kind not in KINDS:
                raise ConfigError(f"unknown kind {kind!r}; choose from {KINDS}")
        if "tol" in p and not p["tol"] > 0:
            raise ConfigError("tolerances must be positive")
        if "rmax" in p and not p["rmax"] > 0:
            raise ConfigError("rmax must be positive")
        for dim in np.atleast_1d(p["dim"]):
            if int(dim) != dim or dim < 2:
                raise ConfigError(f"dimension must be an integer >= 2, got {dim}")
        if self.command == "perturbed":
            for key in ("nr", "ntheta"):
                if not _is_resolution(p[key]):
                    raise ConfigError(f"--{key} must be 16 times a power of two, got {p[key]}")
            if p["shape"] not in SHAPES:
                raise ConfigError(f"unknown shape {p['shape']!r}")
            if p["method"] not in ("continuation", "homotopy"):
                raise ConfigError("method is 'continuation' or 'homotopy'")
            if p["method"] == "homotopy" and p["kind"] != "m+":
                raise ConfigError("the homotopy runs for kind m+ only")
        if self.command in ("radial", "perturbed") and p.get("p") is None:
            raise ConfigError("--p is required")
        if self.command in ("radial", "perturbed") and not p["p"] > 1:
            raise ConfigError("need p > 1")
        return self

    def cache_key(self):
        payload = json.dumps({"command": self.command, "params": self.params,
                              "version": __version__}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:24]


def load_config_file(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve_config(args) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    params = dict(DEFAULTS[args.command])
    if args.config:
        filed = load_config_file(args.config)
        unknown = set(filed) - set(params) - RUNTIME_KEYS
        if unknown:
            raise ConfigError(f"unknown keys in config file: {sorted(unknown)}")
        params.update({k: v for k, v in filed.items() if k in params})
        out = filed.get("out")
    else:
        out = None
    for key in params:
        val = getattr(args, key, None)
        if val is not None:
            params[key] = val
    jobs = params.pop("jobs", None)
    cfg = RunConfig(args.command, params, Path(args.out or out or "pucci_out"),
                    not args.no_cache, jobs)
    return cfg.validate()


# --------------------------------------------------------------------------
# output helpers


def atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _finite(x):
    """JSON-safe float: infinities and NaN become None."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _header(params):
    return "# " + json.dumps({"params": params, "version": __version__}, sort_keys=True)


def write_csv(path, params, columns, rows):
    buf = io.StringIO()
    buf.write(_header(params) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    atomic_write(path, buf.getvalue())


def _write_solution_atomic(path, sol, extra):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write_solution(tmp, sol, extra)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_plain)


def summary(params, result, residual, iters):
    return {"params": params, "result": result,
            "diagnostics": {"residual": _finite(residual), "iters": int(iters)},
            "version": __version__}


# --------------------------------------------------------------------------
# commands


def _problem(kind, N, e, p=2.0):
    if kind == "q+":
        return RadialProblem.dimlike(e.dim_plus(N), p)
    if kind == "q-":
        return RadialProblem.dimlike(e.dim_minus(N), p)
    if kind == "m+":
        return RadialProblem.pucci_plus(N, e, p)
    return RadialProblem.pucci_minus(N, e, p)


def _bounds(kind, N, e):
    """Interval the threshold must lie in, from the analytic bounds."""
    pN = sobolev_exponent(N)
    if kind == "q+":
        b = sobolev_exponent(e.dim_plus(N))
        return pN, b, b
    if kind == "q-":
        b = sobolev_exponent(e.dim_minus(N))
        return b, pN, b
    if kind == "m+":
        return pN, sobolev_exponent(e.dim_plus(N)), None
    return sobolev_exponent(e.dim_minus(N)), pN, None


def exponent_row(params):
    """One row of the exponent table; top level so worker processes can pickle it."""
    kind, N = params["kind"], int(params["dim"])
    e = EllipticityPair(float(params["lambda"]), float(params["Lambda"]))
    lo_b, hi_b, formula = _bounds(kind, N, e)
    prob = _problem(kind, N, e)
    row = {"kind": kind, "lambda": e.lam, "Lambda": e.Lam, "N": N,
           "dim_like": prob.dim if prob.kind == "dimlike" else None,
           "sobolev": _finite(sobolev_exponent(N)),
           "dim_plus_bound": _finite(sobolev_exponent(e.dim_plus(N))),
           "dim_minus_bound": _finite(sobolev_exponent(e.dim_minus(N))),
           "formula": _finite(formula), "interval": [_finite(lo_b), _finite(hi_b)]}
    if prob.kind == "dimlike" and prob.dim <= 2:
        row.update(exponent=None, bracket=None, bounds_respected=True,
                   note="dimension-like number <= 2: positive solutions for every p > 1")
        return row, 0.0, 0
    if kind == "m+" and e.dim_plus(N) <= 2:
        # the tail is then (at best) logarithmic and crossings escape any finite
        # horizon at large p, so a bisection result would be an artefact
        row.update(exponent=None, bracket=None, bounds_respected=True,
                   note="threshold not computed: needs (lambda/Lambda)(N-1)+1 > 2")
        return row, 0.0, 0
    if params.get("p_lo") is not None and params.get("p_hi") is not None:
        bracket = (float(params["p_lo"]), float(params["p_hi"]))
    else:
        try:
            bracket = default_bracket(prob)
        except InvalidBracketError:
            if not np.isfinite(lo_b):
                raise InvalidBracketError("no finite lower bound; pass --p-lo/--p-hi") from None
            # upper bound infinite: search upwards from the finite lower one
            bracket = expand_bracket(prob, max(1.0 + 0.5 * (lo_b - 1.0), lo_b - 0.5),
                                     limit=100.0, rmax=float(params["rmax"]))
        if params.get("p_lo") is not None:
            bracket = (float(params["p_lo"]), bracket[1])
        if params.get("p_hi") is not None:
            bracket = (bracket[0], float(params["p_hi"]))
    tol = float(params["tol"])
    try:
        pc = critical_exponent(prob, bracket, tol=tol, rmax=float(params["rmax"]))
    except InvalidBracketError as exc:
        raise InvalidBracketError(f"{exc} (bracket {bracket}); widen --p-lo/--p-hi") from exc
    iters = max(0, math.ceil(math.log2((bracket[1] - bracket[0]) / tol)))
    ok = (lo_b - tol <= pc) and (pc <= hi_b + tol)
    row.update(exponent=pc, bracket=list(bracket), bounds_respected=bool(ok))
    return row, 0.5 * tol, iters


def cmd_exponent(cfg: RunConfig):
    row, res, iters = exponent_row(cfg.params)
    return summary(cfg.params, row, res, iters), {}


def cmd_radial(cfg: RunConfig):
    P = cfg.params
    kind, N, p = P["kind"], int(P["dim"]), float(P["p"])
    e = EllipticityPair(float(P["lambda"]), float(P["Lambda"]))
    prob = _problem(kind, N, e, p)
    v = dirichlet_radial_solution(prob, tol=float(P["tol"]), rmax=float(P["rmax"]))
    # Q-kinds reduce to the dimension-like equation after scaling by the radial weight
    scale = 1.0
    if kind in ("q+", "q-"):
        scale = (e.Lam if kind == "q+" else e.lam) ** (1.0 / (p - 1))
    residual = profile_residual(v, prob)
    result = {"problem": prob.describe(), "u0": scale * v.values[0],
              "du_at_1": scale * v.derivs[-1], "profile_residual": residual,
              "files": ["profile.csv"]}
    files = {"profile.csv": (["r", "u", "du"],
                             zip(v.radii, scale * v.values, scale * v.derivs))}
    if prob.kind == "dimlike":
        rep = radial_nondegeneracy(v, prob.dim, p)
        result["h_at_1"] = rep.h_at_1
        result["radial_nondegenerate"] = bool(rep.nondegenerate)
        modes = []
        if kind == "q+" and int(P["kmax"]) > 0:
            for m in mode_sweep(v, N, e, p, kmax=int(P["kmax"])):
                modes.append({"k": m.k, "sigma": m.sigma, "a_at_1": m.a_at_1,
                              "ratio": m.ratio, "nondegenerate": bool(m.nondegenerate)})
        result["modes"] = modes
    else:
        result["h_at_1"] = None
        result["modes"] = []
        result["note"] = "linearization checks cover the Q-kinds only"
    return summary(P, result, residual, len(v.radii) - 1), files


def cmd_perturbed(cfg: RunConfig):
    P = cfg.params
    kind, N, p = P["kind"], int(P["dim"]), float(P["p"])
    e = EllipticityPair(float(P["lambda"]), float(P["Lambda"]))
    eps = [float(x) for x in np.atleast_1d(P["eps"])]
    nr, nt = int(P["nr"]), int(P["ntheta"])
    dom = PerturbedBall.from_shape(N, max(eps), P["shape"])
    solutions = {}
    if P["method"] == "homotopy":
        sol = homotopy_in_s(e, N, p, dom, steps=int(P["steps"]), nr=nr, ntheta=nt,
                            tol=float(P["tol"]))
        name = "solution_homotopy.txt"
        solutions[name] = (sol, {"path": [[float(s), float(q)] for s, q in sol.path]})
        result = {"path": [[float(s), float(q)] for s, q in sol.path],
                  "u_max": float(sol.values.max()), "interior_min": sol.interior_min,
                  "files": [name]}
        return summary(P, result, sol.residual_norm, sol.newton_iters), {}, solutions
    rep = continuation_in_epsilon(dom, kind, e, p, eps, nr=nr, ntheta=nt, tol=float(P["tol"]))
    names = []
    for x, sol in zip(rep.epsilons, rep.solutions):
        name = f"solution_eps{x:.6g}.txt"
        solutions[name] = (sol, {"epsilon": x})
        names.append(name)
    solutions["solution_eps0.txt"] = (rep.baseline, {"epsilon": 0.0})
    table = rep.table()
    files = {"delta.csv": (["epsilon", "delta", "residual", "iters"],
                           [(t["epsilon"], t["delta"], t["residual"], t["iters"])
                            for t in table])}
    result = {"delta": [{k: (float(v) if k != "iters" else int(v)) for k, v in t.items()}
                        for t in table],
              "delta_decreasing": rep.monotone,
              "interior_min": [s.interior_min for s in rep.solutions],
              "files": ["delta.csv", "solution_eps0.txt"] + names}
    residual = max(s.residual_norm for s in rep.solutions)
    iters = sum(s.newton_iters for s in rep.solutions)
    return summary(P, result, residual, iters), files, solutions


def cmd_table(cfg: RunConfig):
    P = cfg.params
    cases = []
    for lam, Lam, dim, kind in itertools.product(*(np.atleast_1d(P[k]).tolist()
                                                   for k in ("lambda", "Lambda", "dim", "kind"))):
        if lam > Lam:
            continue
        cases.append({"lambda": float(lam), "Lambda": float(Lam), "dim": int(dim), "kind": kind,
                      "tol": P["tol"], "rmax": P["rmax"], "p_lo": None, "p_hi": None})
    if not cases:
        raise ConfigError("no parameter tuple with lambda <= Lambda")
    workers = cfg.jobs or min(len(cases), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(exponent_row, cases))
    else:
        rows = [exponent_row(c) for c in cases]
    result = {"rows": [r for r, _, _ in rows], "files": ["table.csv"]}
    cols = ["kind", "lambda", "Lambda", "N", "exponent", "sobolev", "dim_plus_bound",
            "dim_minus_bound", "bounds_respected"]
    files = {"table.csv": (cols, [[r[c] for c in cols] for r, _, _ in rows])}
    return (summary(P, result, max(r for _, r, _ in rows), sum(i for _, _, i in rows)), files)


COMMANDS = {"exponent": cmd_exponent, "radial": cmd_radial, "perturbed": cmd_perturbed,
            "table": cmd_table}


def run(cfg: RunConfig):
    """Execute (or fetch from cache) and write all outputs; returns the summary dict."""
    cache = cfg.out / ".cache" / f"{cfg.cache_key()}.json"
    target = cfg.out / f"{cfg.command}.json"
    if cfg.use_cache and cache.exists():
        text = cache.read_text()
        cached = json.loads(text)
        if all((cfg.out / f).exists() for f in cached["result"].get("files", [])):
            log.info("cache hit %s", cache.name)
            atomic_write(target, text)
            return cached
    out = COMMANDS[cfg.command](cfg)
    summ, files = out[0], out[1]
    solutions = out[2] if len(out) > 2 else {}
    cfg.out.mkdir(parents=True, exist_ok=True)
    for name, (cols, rows) in files.items():
        write_csv(cfg.out / name, cfg.params, cols, rows)
    for name, (sol, extra) in solutions.items():
        _write_solution_atomic(cfg.out / name, sol,
                               {"run": cfg.params, "version": __version__, **extra})
    text = _dumps(summ) + "\n"
    atomic_write(target, text)
    if cfg.use_cache:
        atomic_write(cache, text)
    return summ


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pucci-lab",
        description="Critical exponents, radial profiles and perturbed-domain solves.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi=False):
        nargs = "+" if multi else None
        p.add_argument("--lambda", dest="lambda", type=float, nargs=nargs,
                       help="smaller ellipticity constant")
        p.add_argument("--Lambda", dest="Lambda", type=float, nargs=nargs,
                       help="larger ellipticity constant")
        p.add_argument("--dim", type=int, nargs=nargs, metavar="N", help="space dimension N")
        p.add_argument("--kind", choices=KINDS, nargs=nargs, help="operator")
        p.add_argument("--tol", type=float, help="tolerance (meaning depends on the command)")
        p.add_argument("--out", metavar="DIR", help="output directory (default pucci_out)")
        p.add_argument("--config", metavar="FILE", help="JSON file with parameter values")
        p.add_argument("--no-cache", action="store_true", help="ignore and do not write the cache")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("exponent", help="critical exponent by shooting and bisection")
    common(p)
    p.add_argument("--p-lo", type=float, help="lower end of the bisection bracket")
    p.add_argument("--p-hi", type=float, help="upper end of the bisection bracket")
    p.add_argument("--rmax", type=float, help="classification horizon")

    p = sub.add_parser("radial", help="Dirichlet radial profile and non-degeneracy report")
    common(p)
    p.add_argument("--p", type=float, help="exponent")
    p.add_argument("--rmax", type=float, help="shooting horizon")
    p.add_argument("--kmax", type=int, help="highest spherical mode to check")

    p = sub.add_parser("perturbed", help="solutions on perturbed balls")
    common(p)
    p.add_argument("--p", type=float, help="exponent")
    p.add_argument("--eps", type=float, nargs="+", help="decreasing perturbation amplitudes")
    p.add_argument("--shape", choices=sorted(SHAPES), help="boundary perturbation g(theta)")
    p.add_argument("--nr", type=int, help="radial cells (16 times a power of two)")
    p.add_argument("--ntheta", type=int, help="angular cells (16 times a power of two)")
    p.add_argument("--method", choices=("continuation", "homotopy"))
    p.add_argument("--steps", type=int, help="homotopy steps")

    p = sub.add_parser("table", help="exponent table over parameter tuples (parallel)")
    common(p, multi=True)
    p.add_argument("--rmax", type=float, help="classification horizon")
    p.add_argument("--jobs", type=int, help="worker processes")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        summ = run(cfg)
    except SupercriticalError as exc:
        print(f"supercritical: {exc}", file=sys.stderr)
        return EXIT_SUPERCRITICAL
    except (ConfigError, InvalidBracketError, GridError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, HomotopyError, IntegrationError) as exc:
        where = getattr(exc, "epsilon", None)
        where = f" (epsilon={where})" if where is not None else ""
        print(f"solver failure{where}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(_dumps(summ))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
