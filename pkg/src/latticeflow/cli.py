"""Command-line entry point.

Subcommands dispatch to the solver, the constructive pipeline, and the
experiment estimators.  Every run writes its result files plus a manifest
(tool version, config echo, seeds, generator version, output hashes, wall
times).  Result files are a pure function of (config, seed, tool
version); timing lives only in the manifest.  Exit codes: 0 success,
1 configuration error, 2 solver non-convergence (results still written).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .construction import assemble_global, build_chain, projection, repair_measure, stationarity_error
from .environment import (
    RNG_VERSION,
    CostDistribution,
    deserialize_env,
    env_hash,
    sample_square_env,
    sample_torus_env,
    serialize_env,
)
from .experiments import (
    b_sweep,
    concentration_experiment,
    estimate_cm,
    estimate_gamma,
    percolation_probe,
    rows_to_csv,
    slln_check,
    square_growth_probe,
)
from .flow import serialize_flow
from .solver import SolverConfig, solve_global, solve_local
from .transport import deserialize_transport, drift, isotropic_grid

SUBCOMMANDS = (
    "solve-global", "solve-local", "build-skeleton", "assemble",
    "estimate-gamma", "estimate-cm", "concentration", "b-sweep",
    "percolation", "slln", "square-growth",
)


class _CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # collect as config errors instead of exiting
        raise _CliError(message)


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------

_KNOWN_KEYS = {
    "solve-global": {"n", "b", "dist", "seed", "env", "tol", "max-iters", "write-flow"},
    "solve-local": {"m", "b", "dist", "seed", "env", "q", "q-grid", "q-scale", "tol",
                    "max-iters", "write-flow"},
    "build-skeleton": {"n", "m", "q", "q-grid", "seed", "eps", "drift-x", "drift-y"},
    "assemble": {"n", "m", "b", "dist", "seed", "g", "box", "eps", "tol"},
    "estimate-gamma": {"n-list", "b", "dist", "seed", "n-env", "workers", "tol", "max-iters"},
    "estimate-cm": {"m", "b", "dist", "seed", "n-env", "g-list", "workers", "tol", "max-iters"},
    "concentration": {"m", "b", "dist", "seed", "n-samples", "lambda-grid", "q-grid",
                      "q-scale", "n-resamples", "workers", "tol", "max-iters"},
    "b-sweep": {"n", "b-list", "dist", "seed", "n-env", "workers", "tol", "max-iters"},
    "percolation": {"n", "b", "p-list", "cstar", "seed", "n-env", "workers", "tol", "max-iters"},
    "slln": {"n", "b", "dist", "seed", "n-env", "workers", "tol", "max-iters"},
    "square-growth": {"m-list", "b", "dist", "seed", "n-env", "workers", "tol", "max-iters"},
}


def validate_config(path: str | Path, section: str | None = None) -> tuple[dict, list[str]]:
    """Parse a flat INI config; collect all errors instead of failing fast.

    Returns (per-section key/value map, error list).  Unknown sections and
    keys are rejected; values stay as strings for the flag layer to parse.
    """
    errors: list[str] = []
    out: dict[str, dict[str, str]] = {}
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        return {}, [f"config file not found: {path}"]
    except configparser.Error as exc:
        return {}, [f"config parse error: {exc}"]
    for sec in parser.sections():
        if sec not in _KNOWN_KEYS:
            errors.append(f"unknown config section [{sec}]")
            continue
        out[sec] = {}
        for key, value in parser.items(sec):
            if key not in _KNOWN_KEYS[sec]:
                errors.append(f"unknown key {key!r} in section [{sec}]")
            else:
                out[sec][key] = value
    if section is not None and section not in out and not errors:
        out[section] = {}
    return out, errors


def _merge_config(args: argparse.Namespace, section: str) -> list[str]:
    """Fill unset CLI flags from the config file section, if any."""
    errors: list[str] = []
    if not getattr(args, "config", None):
        return errors
    table, errs = validate_config(args.config, section)
    errors.extend(errs)
    for key, value in table.get(section, {}).items():
        attr = key.replace("-", "_")
        if getattr(args, attr, None) is None:
            setattr(args, attr, value)
    return errors


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x != ""]


def _parse_float_list(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x != ""]


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dict__"):
        return {k: v for k, v in vars(obj).items() if not k.startswith("_")}
    return str(obj)


class _Run:
    """Output directory with manifest bookkeeping."""

    def __init__(self, out_dir: str | Path, command: str, config_echo: dict):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config_echo = config_echo
        self.outputs: dict[str, str] = {}
        self.wall: dict[str, float] = {}
        self.t0 = time.perf_counter()

    def write(self, name: str, text: str) -> None:
        path = self.dir / name
        path.write_text(text)
        self.outputs[name] = hashlib.sha256(text.encode()).hexdigest()

    def write_json(self, name: str, payload) -> None:
        self.write(name, json.dumps(payload, indent=2, sort_keys=True,
                                    default=_json_default) + "\n")

    def finish(self) -> None:
        manifest = {
            "tool_version": __version__,
            "rng_version": RNG_VERSION,
            "command": self.command,
            "config": self.config_echo,
            "outputs": self.outputs,
            "wall_time_s": round(time.perf_counter() - self.t0, 6),
        }
        (self.dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n"
        )


def _solver_config(args, cap: float) -> SolverConfig:
    cfg = SolverConfig(cap=cap)
    if getattr(args, "tol", None) is not None:
        cfg = replace(cfg, rel_tol=float(args.tol))
    if getattr(args, "max_iters", None) is not None:
        cfg = replace(cfg, max_iters=int(args.max_iters))
    return cfg


def _need(args, names: list[str], errors: list[str]) -> None:
    for name in names:
        if getattr(args, name.replace("-", "_"), None) is None:
            errors.append(f"missing required option --{name}")


def _result_payload(res, extra=None) -> dict:
    payload = {
        "objective": res.objective,
        "gap": res.gap,
        "max_violation": res.max_violation,
        "wardrop_residual": res.wardrop_residual,
        "iterations": res.iterations,
        "converged": res.converged,
        "feasible": res.feasible,
        "env_hash": res.env_hash,
        "config": {
            "cap": res.config.cap,
            "rel_tol": res.config.rel_tol,
            "max_iters": res.config.max_iters,
            "capacity_mode": res.config.capacity_mode,
        },
    }
    payload.update(extra or {})
    return payload


def _record_rows(experiment: str, fixed: dict, rows: list[dict], start: int = 0) -> list[dict]:
    out = []
    for i, row in enumerate(rows):
        entry = {"experiment": experiment, "replicate": start + i}
        entry.update(fixed)
        entry.update({k: row.get(k) for k in ("objective", "gap", "residual", "violation")})
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_solve_global(args) -> int:
    errors = _merge_config(args, "solve-global")
    _need(args, ["n", "b", "out"], errors)
    if args.env is None:
        _need(args, ["dist", "seed"], errors)
    if args.b is not None and float(args.b) < 0.25:
        errors.append("b must be at least 1/4 (and exceed 1/4 unless n is even)")
    if errors:
        _fail(errors)
        return 1
    n = int(args.n)
    if args.env:
        env = deserialize_env(Path(args.env).read_text())
    else:
        env = sample_torus_env(n, CostDistribution.parse(args.dist), int(args.seed))
    cfg = _solver_config(args, float(args.b))
    try:
        res = solve_global(n, env, cfg)
    except ValueError as exc:
        _fail([str(exc)])
        return 1
    run = _Run(args.out, "solve-global", _echo(args))
    run.write_json("result.json", _result_payload(res, {"n": n}))
    run.write("env.txt", serialize_env(env))
    if getattr(args, "write_flow", None):
        run.write("flow.txt", serialize_flow(res.flow, "torus"))
    run.finish()
    return 0 if res.converged else 2


def _cmd_solve_local(args) -> int:
    errors = _merge_config(args, "solve-local")
    _need(args, ["m", "b", "out"], errors)
    if args.env is None:
        _need(args, ["dist", "seed"], errors)
    if args.q is None and args.q_grid is None:
        errors.append("missing required option --q (transport measure file) or --q-grid")
    if errors:
        _fail(errors)
        return 1
    m = int(args.m)
    if args.q is not None:
        q_path = Path(args.q)
        if not q_path.exists():
            _fail([f"missing transport measure file: --q {args.q}"])
            return 1
        Q = deserialize_transport(q_path.read_text())
    else:
        Q = isotropic_grid(m, int(args.q_grid)).mean_measure()
        if args.q_scale is not None:
            Q = Q.scaled(float(args.q_scale))
    if args.env:
        env = deserialize_env(Path(args.env).read_text())
    else:
        env = sample_square_env(m, CostDistribution.parse(args.dist), int(args.seed))
    cfg = _solver_config(args, float(args.b))
    res = solve_local(m, env, Q, cfg)
    run = _Run(args.out, "solve-local", _echo(args))
    run.write_json("result.json", _result_payload(res, {"m": m}))
    run.write("env.txt", serialize_env(env))
    if getattr(args, "write_flow", None):
        run.write("flow.txt", serialize_flow(res.flow, "square"))
    run.finish()
    return 0 if res.converged else 2


def _cmd_build_skeleton(args) -> int:
    errors = _merge_config(args, "build-skeleton")
    _need(args, ["n", "m", "out"], errors)
    if errors:
        _fail(errors)
        return 1
    n, m = int(args.n), int(args.m)
    if n % m:
        _fail([f"square size {m} must divide torus size {n}"])
        return 1
    if args.q is not None:
        Q = deserialize_transport(Path(args.q).read_text())
    else:
        from .transport import drift_measure

        u = (float(args.drift_x or 0.5), float(args.drift_y or 0.5))
        Q = drift_measure(m, u)
    if args.eps is not None:
        Q = repair_measure(Q, float(args.eps))
    chain = build_chain(Q, n, m)
    proj = projection(chain)
    run = _Run(args.out, "build-skeleton", _echo(args))
    run.write_json("skeleton.json", {
        "n": n,
        "m": m,
        "states": chain.space.n_states,
        "boundary_points": chain.space.n_points,
        "t": chain.t,
        "q_bar": chain.q_bar,
        "drift": list(drift(chain.measure)),
        "stationarity_l1": stationarity_error(chain),
        "irreducible": proj.is_irreducible(),
    })
    run.finish()
    return 0


def _cmd_assemble(args) -> int:
    errors = _merge_config(args, "assemble")
    _need(args, ["n", "m", "b", "dist", "seed", "out"], errors)
    if errors:
        _fail(errors)
        return 1
    n, m = int(args.n), int(args.m)
    if n % m:
        _fail([f"square size {m} must divide torus size {n}"])
        return 1
    env = sample_torus_env(n, CostDistribution.parse(args.dist), int(args.seed))
    cfg = _solver_config(args, float(args.b))
    mixture = isotropic_grid(m, int(args.g or 2))
    res = assemble_global(n, m, env, mixture=mixture,
                          box=int(args.box) if args.box else None, cfg=cfg,
                          repair_eps=float(args.eps or 1e-3))
    run = _Run(args.out, "assemble", _echo(args))
    run.write_json("assembly.json", {
        "n": n, "m": m, "cost": res.cost, "target": res.target,
        "scale": res.scale, "correction_mass": res.correction_mass,
        "repair_lambda": res.repair_lambda, "tra_audit": res.tra_audit,
        "local": res.local_summary, "diagnostics": res.diagnostics,
    })
    run.write("flow.txt", serialize_flow(res.flow, "torus"))
    run.finish()
    return 0


def _experiment_command(name, args, runner) -> int:
    errors = _merge_config(args, name)
    _need(args, ["seed", "out"], errors)
    extra = _validate_experiment(name, args, errors)
    if errors:
        _fail(errors)
        return 1
    summary, rows = runner(args, extra)
    run = _Run(args.out, name, _echo(args))
    run.write("results.csv", rows_to_csv(rows))
    run.write_json("summary.json", summary)
    run.finish()
    return 0


def _validate_experiment(name, args, errors) -> dict:
    if name in ("estimate-gamma", "b-sweep", "percolation", "slln") and args.n is None:
        errors.append("missing required option --n" +
                      ("-list" if name == "estimate-gamma" else ""))
    if name in ("estimate-cm", "concentration") and args.m is None:
        errors.append("missing required option --m")
    if name == "square-growth" and args.m_list is None:
        errors.append("missing required option --m-list")
    if name == "b-sweep":
        if args.b_list is None:
            errors.append("missing required option --b-list")
        else:
            blist = _parse_float_list(args.b_list)
            if any(b < 0.25 for b in blist):
                errors.append("all caps in --b-list must be at least 1/4")
    elif name != "square-growth" and getattr(args, "b", None) is None:
        errors.append("missing required option --b")
    elif name == "square-growth" and args.b is None:
        errors.append("missing required option --b")
    if getattr(args, "b", None) is not None and name in ("estimate-gamma", "slln", "percolation"):
        if float(args.b) <= 0.25:
            errors.append("b must exceed 1/4 for standardized global problems")
    return {}


def _dist_of(args) -> CostDistribution:
    return CostDistribution.parse(args.dist or "uniform:1.0")


def _common_kwargs(args) -> dict:
    kw = {}
    if getattr(args, "workers", None) is not None:
        kw["workers"] = int(args.workers)
    return kw


def _run_estimate_gamma(args, _extra):
    out = estimate_gamma(_parse_int_list(args.n), float(args.b), _dist_of(args),
                         int(args.n_env or 20), int(args.seed),
                         cfg=_solver_config(args, float(args.b)), **_common_kwargs(args))
    rows = []
    for n, rec in out["table"].items():
        fixed = {"n": n, "b": float(args.b), "seed": int(args.seed)}
        rows.extend(_record_rows("estimate-gamma", fixed, rec.extra["rows"]))
        rec.extra.pop("rows", None)
    return out, rows


def _run_estimate_cm(args, _extra):
    out = estimate_cm(int(args.m), float(args.b), _dist_of(args),
                      int(args.n_env or 20), int(args.seed),
                      g_list=tuple(_parse_int_list(args.g_list or "1,2")),
                      cfg=_solver_config(args, float(args.b)), **_common_kwargs(args))
    rows = []
    for g, rec in out["per_g"].items():
        fixed = {"m": int(args.m), "b": float(args.b), "g": g, "seed": int(args.seed)}
        rows.extend(_record_rows("estimate-cm", fixed, rec.extra["rows"]))
        rec.extra.pop("rows", None)
    return out, rows


def _run_concentration(args, _extra):
    m = int(args.m)
    Q = isotropic_grid(m, int(args.q_grid or 2)).mean_measure()
    Q = Q.scaled(float(args.q_scale or 0.5))
    grid = _parse_float_list(args.lambda_grid or "0.05,0.1,0.2,0.4,0.8")
    out = concentration_experiment(m, float(args.b), Q, _dist_of(args),
                                   int(args.n_samples or 100), grid, int(args.seed),
                                   cfg=_solver_config(args, float(args.b)),
                                   n_resamples=int(args.n_resamples or 100),
                                   **_common_kwargs(args))
    rows = [{"experiment": "concentration", "m": m, "b": float(args.b),
             "seed": int(args.seed), "replicate": i, "objective": t["lambda"],
             "gap": t["bound"], "residual": t["empirical"]}
            for i, t in enumerate(out["tail"])]
    return out, rows


def _run_b_sweep(args, _extra):
    out = b_sweep(int(args.n), _dist_of(args), _parse_float_list(args.b_list),
                  int(args.n_env or 20), int(args.seed),
                  cfg=_solver_config(args, 0.5), **_common_kwargs(args))
    rows = []
    for i, row in enumerate(out["rows"]):
        for b, res in row["per_b"].items():
            rows.append({"experiment": "b-sweep", "n": int(args.n), "b": b,
                         "seed": row["seed"], "replicate": i,
                         "objective": res["objective"], "gap": res["gap"],
                         "residual": res["residual"], "violation": res["violation"]})
    out.pop("rows", None)
    return out, rows


def _run_percolation(args, _extra):
    out = percolation_probe(int(args.n), float(args.b), _parse_float_list(args.p_list),
                            float(args.cstar or 1.0), int(args.n_env or 20),
                            int(args.seed), cfg=_solver_config(args, float(args.b)),
                            **_common_kwargs(args))
    rows = []
    for p, rec in out["table"].items():
        fixed = {"n": int(args.n), "b": float(args.b), "p": p, "seed": int(args.seed)}
        rows.extend(_record_rows("percolation", fixed, rec.extra["rows"]))
        rec.extra.pop("rows", None)
    return out, rows


def _run_slln(args, _extra):
    out = slln_check(int(args.n), float(args.b), _dist_of(args),
                     int(args.n_env or 100), int(args.seed),
                     cfg=_solver_config(args, float(args.b)), **_common_kwargs(args))
    rows = [{"experiment": "slln", "n": int(args.n), "b": float(args.b),
             "seed": int(args.seed), "replicate": i, "objective": c["lambda"],
             "gap": c["bound"], "residual": c["empirical"]}
            for i, c in enumerate(out["checks"])]
    return out, rows


def _run_square_growth(args, _extra):
    out = square_growth_probe(_parse_int_list(args.m_list), float(args.b), _dist_of(args),
                              int(args.n_env or 10), int(args.seed),
                              cfg=_solver_config(args, float(args.b)),
                              **_common_kwargs(args))
    rows = []
    for m, est in out["estimates"].items():
        for g, rec in est["per_g"].items():
            fixed = {"m": m, "b": float(args.b), "g": g, "seed": int(args.seed)}
            rows.extend(_record_rows("square-growth", fixed, rec.extra["rows"]))
            rec.extra.pop("rows", None)
    return out, rows


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())
            if k not in ("func",) and v is not None}


def _fail(errors: list[str]) -> None:
    for e in errors:
        print(f"error: {e}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", help="INI config file with a section per subcommand")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--seed", type=int, help="master seed (required for stochastic runs)")
    sp.add_argument("--dist", help="cost distribution, e.g. constant:1, uniform:1, "
                                   "twopoint:0.5:1, discrete:0:0.5,1:0.5")
    sp.add_argument("--tol", type=float, help="solver relative tolerance")
    sp.add_argument("--max-iters", type=int, help="solver iteration cap per round")
    sp.add_argument("--workers", type=int, help="parallel replication degree")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latticeflow",
                     description="congestion-cost flow solver and simulator "
                                 "on disordered torus lattices")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve-global", parents=[], help="solve the torus problem")
    _add_common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--b", type=float)
    sp.add_argument("--env", help="environment file instead of sampling")
    sp.add_argument("--write-flow", action="store_const", const=True)
    sp.set_defaults(func=_cmd_solve_global)

    sp = sub.add_parser("solve-local", help="solve the square-crossing problem")
    _add_common(sp)
    sp.add_argument("--m", type=int)
    sp.add_argument("--b", type=float)
    sp.add_argument("--env")
    sp.add_argument("--q", help="transport measure file")
    sp.add_argument("--q-grid", type=int, help="use the mean of a drift-target grid")
    sp.add_argument("--q-scale", type=float)
    sp.add_argument("--write-flow", action="store_const", const=True)
    sp.set_defaults(func=_cmd_solve_local)

    sp = sub.add_parser("build-skeleton", help="build and audit a boundary walk")
    _add_common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--q")
    sp.add_argument("--q-grid", type=int)
    sp.add_argument("--drift-x", type=float)
    sp.add_argument("--drift-y", type=float)
    sp.add_argument("--eps", type=float, help="irreducibility repair weight")
    sp.set_defaults(func=_cmd_build_skeleton)

    sp = sub.add_parser("assemble", help="assemble a global flow from local flows")
    _add_common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--b", type=float)
    sp.add_argument("--g", type=int, help="drift-target grid resolution")
    sp.add_argument("--box", type=int, help="odd endpoint-smoothing box side")
    sp.add_argument("--eps", type=float)
    sp.set_defaults(func=_cmd_assemble)

    for name, runner in (
        ("estimate-gamma", _run_estimate_gamma),
        ("estimate-cm", _run_estimate_cm),
        ("concentration", _run_concentration),
        ("b-sweep", _run_b_sweep),
        ("percolation", _run_percolation),
        ("slln", _run_slln),
        ("square-growth", _run_square_growth),
    ):
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        _add_common(sp)
        sp.add_argument("--n", help="size or comma list" if name == "estimate-gamma" else "torus size")
        sp.add_argument("--m", type=int)
        sp.add_argument("--b", type=float)
        sp.add_argument("--n-env", type=int)
        sp.add_argument("--b-list")
        sp.add_argument("--p-list")
        sp.add_argument("--m-list")
        sp.add_argument("--g-list")
        sp.add_argument("--cstar", type=float)
        sp.add_argument("--n-samples", type=int)
        sp.add_argument("--n-resamples", type=int)
        sp.add_argument("--lambda-grid")
        sp.add_argument("--q-grid", type=int)
        sp.add_argument("--q-scale", type=float)
        sp.set_defaults(func=lambda a, r=runner, nm=name: _experiment_command(nm, a, r))

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _CliError as exc:
        _fail([str(exc)])
        return 1
    try:
        return args.func(args)
    except _CliError as exc:
        _fail([str(exc)])
        return 1
    except (ValueError, OSError) as exc:
        _fail([str(exc)])
        return 1


if __name__ == "__main__":
    sys.exit(main())
