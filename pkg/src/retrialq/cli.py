"""``retrialq`` command-line front end.

Exit codes: 0 ok, 1 other library error, 2 invalid config or manifest,
3 non-convergence, 4 dimension cap, 5 infeasible optimisation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import (ConfigError, DimensionCapError, InfeasibleError, NonConvergenceError,
                     RetrialQError, SolverError)
from .measures import compute_measures
from .model import validate
from .solver import solve

EXIT_CODES = ((ConfigError, 2), (NonConvergenceError, 3), (SolverError, 3),
              (DimensionCapError, 4), (InfeasibleError, 5), (RetrialQError, 1))


# ---------------------------------------------------------------- helpers

def _config(args):
    raw = cfgmod.load_raw(args.config, args.preset)
    raw = cfgmod.apply_overrides(raw, args.set)
    trunc = raw.setdefault("system", {}).setdefault("truncation", {})
    if args.trunc_eps is not None:
        trunc["eps"] = args.trunc_eps
    if args.m_cap is not None:
        trunc["m_cap"] = args.m_cap
    return cfgmod.from_dict(raw)


def _header(cfg) -> str:
    return f"# config-hash: {cfgmod.config_hash(cfg)}\n"


def _emit(args, text: str, name: str):
    """Write ``text`` to ``--out/name`` or to stdout."""
    if args.out is None:
        sys.stdout.write(text)
        return
    path = Path(args.out) / name
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    print(path)


def _csv(rows, header_row) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header_row)
    w.writerows([[repr(x) if isinstance(x, float) else x for x in r] for r in rows])
    return buf.getvalue()


def _grid(text: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma list."""
    try:
        if ":" in text:
            a, b, h = (float(x) for x in text.split(":"))
            if h <= 0 or b < a:
                raise ValueError
            n = int(math.floor((b - a) / h + 1e-9))
            return [round(a + k * h, 12) for k in range(n + 1)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {text!r}; use a:b:step or a comma list") from None


def _solve(cfg, args):
    return solve(cfg, mode=args.mode)


# ------------------------------------------------------------ subcommands

def cmd_validate(args) -> int:
    raw = cfgmod.apply_overrides(cfgmod.load_raw(args.config, args.preset), args.set)
    try:
        cfg = cfgmod.from_dict(raw)
    except ConfigError as exc:
        print(json.dumps({"ok": False, "violations": exc.violations or [str(exc)]}, indent=2))
        return 2
    violations = validate(cfg)
    print(json.dumps({"ok": not violations, "violations": violations,
                      "config_hash": cfgmod.config_hash(cfg)}, indent=2))
    return 0 if not violations else 2


def cmd_solve(args) -> int:
    cfg = _config(args)
    ss = _solve(cfg, args)
    head = _header(cfg)
    mass = ss.level_mass
    summary = {"config_hash": cfgmod.config_hash(cfg), "M": ss.M, "mode": ss.mode,
               "balance_residual": ss.residual, "eq1_residual": ss.eq1_residual,
               "top_level_mass": float(mass[-1]),
               "dimension": int(sum(z.size for z in ss.z))}
    if args.out is None:
        print(json.dumps(summary, indent=2))
        return 0
    _emit(args, head + cfgmod.dump_yaml(cfg), "config.yaml")
    _emit(args, head + _csv(enumerate(mass.tolist()), ("level", "mass")), "levels.csv")
    _emit(args, json.dumps(summary, indent=2) + "\n", "summary.json")
    path = Path(args.out) / "steady_state.npz"
    np.savez_compressed(path, config_hash=np.array(summary["config_hash"]),
                        **{f"z{l}": z for l, z in enumerate(ss.z)})
    print(path)
    return 0


def cmd_measures(args) -> int:
    cfg = _config(args)
    rep = compute_measures(_solve(cfg, args))
    if args.format == "json":
        body = json.loads(rep.to_json())
        body["config_hash"] = cfgmod.config_hash(cfg)
        _emit(args, json.dumps(body, indent=2) + "\n", "measures.json")
    else:
        _emit(args, _header(cfg) + _csv(rep.flat().items(), ("measure", "value")), "measures.csv")
    return 0


def cmd_simulate(args) -> int:
    from .simulator import estimates_csv, simulate
    cfg = _config(args)
    M = args.orbit_m if args.orbit_m is not None else cfg.truncation.M
    est = simulate(cfg, events=args.events, seed=args.seed, batches=args.batches, M=M,
                   victim=args.victim)
    _emit(args, estimates_csv(est.rows(""), header=_header(cfg)), "simulate.csv")
    return 0


def _sweep_point(base, axis, S, x, mode):
    from .simulator import retarget
    cfg = base.replace(S=S) if S is not None else base
    cfg = retarget(cfg, axis, x)
    return cfg.S, x, compute_measures(solve(cfg, mode=mode)).flat()


def cmd_sweep(args) -> int:
    base = _config(args)
    grid = _grid(args.grid)
    s_list = [int(s) for s in args.s.split(",")] if args.s else [None]
    measures = [m.strip() for m in args.measure.split(",") if m.strip()]
    jobs = [(S, x) for S in s_list for x in grid]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        out = list(pool.map(lambda sx: _sweep_point(base, args.axis, sx[0], sx[1], args.mode), jobs))
    for m in measures:
        if m not in out[0][2]:
            raise ConfigError(f"unknown measure {m!r}")
    if args.wide:
        rows = [[S, x] + [flat[m] for m in measures] for S, x, flat in out]
        text = _csv(rows, ["S", args.axis] + measures)
    else:
        rows = [[S, args.axis, x, m, flat[m]] for S, x, flat in out for m in measures]
        text = _csv(rows, ("S", "axis", "value", "measure", "estimate"))
    _emit(args, _header(base) + text, "sweep.csv")
    return 0


def cmd_optimize(args) -> int:
    from . import optimize as opt
    from .model import ph_mean_rate
    base = _config(args)
    problem = opt.OptimizationProblem(
        base, eps1=args.eps1, eps2=args.eps2, s_min=args.s_min, s_max=args.s_max,
        lambda_min=args.lambda_min, lambda_max=args.lambda_max, grid_step=args.grid_step,
        penalty=args.penalty, quantum=args.quantum, lambda_objective=args.lambda_objective,
        trunc_eps=args.trunc_eps, m_cap=args.m_cap)
    ev = opt.Evaluator(problem)
    methods = ["ds", "pso", "sa"] if args.method == "all" else [args.method]
    results = []
    for m in methods:
        if m == "ds":
            r = opt.direct_search(problem, evaluator=ev)
        elif m == "pso":
            r = opt.pso(problem, swarm=args.swarm, maxite=args.maxite, seed=args.seed, evaluator=ev)
        else:
            r = opt.simulated_annealing(problem, seed=args.seed, evaluator=ev)
        results.append(r)
    mu_h = ph_mean_rate(base.service_h)
    if args.wide:
        text = _csv([r.row(mu_h) for r in results],
                    ("mu_h", "S", "lambda_h", "P_d", "P_preempt", "iterations"))
    else:
        text = opt.results_csv([(r.method, mu_h, r) for r in results])
    _emit(args, _header(base) + text, "optimize.csv")
    if not all(r.feasible and r.verified for r in results):
        print("no feasible allocation found within the bounds", file=sys.stderr)
        return 5
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", help="YAML config file")
    src.add_argument("--preset", help=f"bundled preset: {', '.join(cfgmod.preset_names())}")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted key or shorthand); repeatable")
    common.add_argument("--out", help="output directory (default: stdout)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--mode", choices=("ordered", "lumped"), default="lumped")
    common.add_argument("--trunc-eps", type=float, default=None)
    common.add_argument("--m-cap", type=int, default=None)
    common.add_argument("--wide", action="store_true", help="one row per point instead of long format")

    p = argparse.ArgumentParser(prog="retrialq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check a config")
    sub.add_parser("solve", parents=[common], help="steady state")
    m = sub.add_parser("measures", parents=[common], help="performance measures")
    m.add_argument("--format", choices=("csv", "json"), default="csv")
    s = sub.add_parser("simulate", parents=[common], help="discrete-event estimates")
    s.add_argument("--events", type=int, default=1_000_000)
    s.add_argument("--batches", type=int, default=20)
    s.add_argument("--orbit-m", type=int, default=None,
                   help="truncation level to mirror in the orbit histogram and P_b")
    s.add_argument("--victim", choices=("newest", "uniform"), default="newest")
    w = sub.add_parser("sweep", parents=[common], help="solver sweep along one axis")
    w.add_argument("--axis", required=True,
                   choices=("S", "lambda_h", "lambda_n", "mu_h", "mu_n", "theta"))
    w.add_argument("--grid", required=True, help="a:b:step or comma list")
    w.add_argument("--measure", default="P_d,P_preempt")
    w.add_argument("--s", default=None, help="comma list of channel counts")
    w.add_argument("--jobs", type=int, default=1)
    o = sub.add_parser("optimize", parents=[common], help="channel allocation")
    o.add_argument("--method", choices=("ds", "pso", "sa", "all"), default="ds")
    o.add_argument("--eps1", type=float, default=1e-3)
    o.add_argument("--eps2", type=float, default=1e-3)
    o.add_argument("--s-min", type=int, default=2)
    o.add_argument("--s-max", type=int, default=5)
    o.add_argument("--lambda-min", type=float, default=0.01)
    o.add_argument("--lambda-max", type=float, default=2.0)
    o.add_argument("--grid-step", type=float, default=0.025)
    o.add_argument("--penalty", type=float, default=1e8)
    o.add_argument("--quantum", type=float, default=1e-3)
    o.add_argument("--lambda-objective", choices=("max", "free"), default="max")
    o.add_argument("--swarm", type=int, default=60)
    o.add_argument("--maxite", type=int, default=200)
    return p


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "measures": cmd_measures,
            "simulate": cmd_simulate, "sweep": cmd_sweep, "optimize": cmd_optimize}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except RetrialQError as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
