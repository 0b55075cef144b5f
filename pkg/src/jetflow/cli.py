"""Command-line front end: ``jetflow {simulate,convergence,table1,list-problems}``.

Settings come from flags and optionally from a JSON file given with
``--config``; flags that are set explicitly override the file. Exit status
is 0 on success, 2 for configuration errors and 3 for numerical divergence
(partial results are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import analysis
from .brownian import RNG_ID, BrownianPath, common_path, uniform_grid
from .errors import ConfigurationError, DivergenceError, GridError
from .ode_flow import METHODS, OdeSolverSpec
from .schemes import DT_JET, Scheme, Trajectory, parse_scheme, simulate
from .sde_model import get_problem, list_problems

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

OBSERVABLES = {
    "first": lambda x: x[..., 0],
    "norm2": lambda x: np.sum(x**2, axis=-1),
}


@dataclass
class ExperimentConfig:
    problem: str = "kepler"
    params: dict = field(default_factory=dict)
    schemes: list = field(default_factory=lambda: ["jet-dt"])
    ode: str = "adams8"
    substeps: int = 4
    expansion_base: str = "dt"
    T: float = 10.0
    steps: list = field(default_factory=lambda: [100])
    n_paths: int = 1000
    seed: int = 0
    out: str = "."
    format: str = "csv"
    study: str = "strong"
    reference: str = "analytic"
    observable: str = "first"
    weak_reference: str = "pathwise"
    workers: Optional[int] = None

    def validate(self) -> None:
        if self.problem not in list_problems():
            raise ConfigurationError(
                f"unknown problem {self.problem!r}; known problems: {', '.join(list_problems())}"
            )
        if not self.steps:
            raise ConfigurationError("the list of step counts must be nonempty")
        if any(int(n) != n or n < 1 for n in self.steps):
            raise ConfigurationError("step counts must be positive integers")
        if not self.T > 0:
            raise ConfigurationError("T must be positive")
        if self.n_paths < 1:
            raise ConfigurationError("n_paths must be positive")
        if self.format not in ("csv", "json"):
            raise ConfigurationError("format must be 'csv' or 'json'")
        if self.study not in ("strong", "weak", "drift"):
            raise ConfigurationError("study must be strong, weak or drift")
        if self.observable not in OBSERVABLES:
            raise ConfigurationError(f"observable must be one of {sorted(OBSERVABLES)}")
        self.build_schemes()

    def build_problem(self):
        try:
            return get_problem(self.problem, **self.params)
        except TypeError as exc:
            raise ConfigurationError(f"bad parameters for {self.problem!r}: {exc}") from None

    def build_schemes(self) -> list[Scheme]:
        spec = OdeSolverSpec(self.ode, int(self.substeps))
        return [parse_scheme(name, spec, self.expansion_base) for name in self.schemes]

    def grids(self):
        return [uniform_grid(float(self.T), int(n)) for n in self.steps]


def _parse_param(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _common(parser: argparse.ArgumentParser) -> None:
    # every default is None so that only explicit flags override the config file
    parser.add_argument("--config", help="JSON file with experiment settings")
    parser.add_argument("--problem", help="registered problem name (see list-problems)")
    parser.add_argument("--param", action="append", type=_parse_param, dest="params",
                        metavar="NAME=VALUE", help="problem parameter, repeatable")
    parser.add_argument("--scheme", nargs="+", dest="schemes",
                        help="em, jet-dt, jet-dw2, expansion-2, expansion-3")
    parser.add_argument("--ode", choices=METHODS, help="ODE solver for the jet flow")
    parser.add_argument("--substeps", type=int, help="ODE steps per jet step")
    parser.add_argument("--expansion-base", choices=("dt", "dw2"), dest="expansion_base")
    parser.add_argument("--T", type=float, help="final time")
    parser.add_argument("--steps", type=int, nargs="+", help="number of steps N, one or more")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--format", choices=("csv", "json"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jetflow", description="Jet schemes for SDEs on manifolds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write one trajectory per scheme and step count")
    _common(p)

    p = sub.add_parser("convergence", help="Monte Carlo strong, weak or manifold-drift order study")
    _common(p)
    p.add_argument("--study", choices=("strong", "weak", "drift"))
    p.add_argument("--paths", type=int, dest="n_paths", help="Monte Carlo sample count")
    p.add_argument("--reference", choices=("analytic", "fine"), help="strong-error reference")
    p.add_argument("--observable", choices=sorted(OBSERVABLES), help="weak test function")
    p.add_argument("--weak-reference", dest="weak_reference",
                   help="'pathwise' or a known value of E[g(X_T)]")
    p.add_argument("--workers", type=int, help="Monte Carlo threads (capped by JETFLOW_THREADS)")

    p = sub.add_parser("table1", help="angular momentum at T=10 for EM and the jet scheme")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--n-seeds", type=int, default=10, dest="n_seeds")
    p.add_argument("--step-lengths", type=float, nargs="+", default=[1.0, 0.4, 0.1, 0.01],
                   dest="step_lengths")
    p.add_argument("--problem", default="kepler", choices=("kepler", "kepler-modulated"))
    p.add_argument("--ode", choices=METHODS, default="adams8")
    p.add_argument("--substeps", type=int, default=4)
    p.add_argument("--T", type=float, default=10.0)
    p.add_argument("--out", default=".")
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    sub.add_parser("list-problems", help="show the registered problems")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    settings: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                settings = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config file {args.config!r}: {exc}") from exc
        if not isinstance(settings, dict):
            raise ConfigurationError("the config file must hold a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(settings) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for name in known:
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "params":
            value = {**settings.get("params", {}), **dict(value)}
        settings[name] = value
    if isinstance(settings.get("schemes"), str):
        settings["schemes"] = [settings["schemes"]]
    if isinstance(settings.get("steps"), int):
        settings["steps"] = [settings["steps"]]
    cfg = ExperimentConfig(**settings)
    cfg.validate()
    return cfg


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "-" for c in text)


def _write_trajectory(traj: Trajectory, path_values, problem, filename: str, fmt: str) -> None:
    extra = {}
    w = np.asarray(path_values)[: traj.states.shape[0]]
    for a in range(w.shape[-1]):
        extra[f"W{a + 1}"] = w[:, a]
    if problem.analytic_solution is not None:
        t = traj.grid.points[:, None]
        exact = problem.analytic_solution(problem.initial_state, t, w)
        for i in range(exact.shape[-1]):
            extra[f"X{i + 1}"] = exact[:, i]
    if fmt == "csv":
        traj.to_csv(filename, extra)
        return
    data = {
        "t": traj.grid.points.tolist(),
        "states": traj.states.tolist(),
        "invariants": {name: traj.invariant_log[:, j].tolist()
                       for j, name in enumerate(traj.invariant_names)},
        "extra": {k: np.asarray(v).tolist() for k, v in extra.items()},
    }
    with open(filename, "w") as fh:
        json.dump(data, fh, sort_keys=True)
        fh.write("\n")


def cmd_simulate(cfg: ExperimentConfig) -> int:
    problem = cfg.build_problem()
    grids = cfg.grids()
    paths = common_path(grids, problem.dim_noise, cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    status = EXIT_OK
    for scheme in cfg.build_schemes():
        for grid, path in zip(grids, paths):
            name = f"{_slug(problem.name)}_{_slug(scheme.label)}_N{grid.n_steps}.{cfg.format}"
            filename = os.path.join(cfg.out, name)
            try:
                traj = simulate(problem, scheme, path)
            except DivergenceError as exc:
                _write_trajectory(exc.partial, path.values, problem, filename, cfg.format)
                print(f"{scheme.label} N={grid.n_steps}: {exc} (partial output in {filename})",
                      file=sys.stderr)
                status = EXIT_DIVERGED
                continue
            _write_trajectory(traj, path.values, problem, filename, cfg.format)
            summary = " ".join(f"{n}={v:.10g}" for n, v in zip(traj.invariant_names, traj.invariant_log[-1]))
            print(f"{scheme.label} N={grid.n_steps} dt={grid.max_step:.6g} {summary} -> {filename}")
    return status


def cmd_convergence(cfg: ExperimentConfig) -> int:
    problem = cfg.build_problem()
    grids = cfg.grids()
    os.makedirs(cfg.out, exist_ok=True)
    for scheme in cfg.build_schemes():
        if cfg.study == "strong":
            report = analysis.strong_error(problem, scheme, grids, cfg.n_paths, cfg.seed,
                                           reference=cfg.reference, workers=cfg.workers)
        elif cfg.study == "weak":
            ref = cfg.weak_reference
            if ref != "pathwise":
                try:
                    ref = float(ref)
                except ValueError:
                    raise ConfigurationError("weak reference must be 'pathwise' or a number") from None
            report = analysis.weak_error(problem, scheme, OBSERVABLES[cfg.observable], ref, grids,
                                         cfg.n_paths, cfg.seed, workers=cfg.workers)
        else:
            report = analysis.manifold_drift(problem, scheme, grids, cfg.n_paths, cfg.seed,
                                             workers=cfg.workers)
        stem = os.path.join(cfg.out, f"convergence_{cfg.study}_{_slug(problem.name)}_{_slug(scheme.label)}")
        report.to_json(stem + ".json")
        report.to_csv(stem + ".csv")
        print(f"{scheme.label} {cfg.study}: slope={report.fitted_slope:.4g} "
              f"residual={report.fit_residual:.3g} status={report.status} -> {stem}.json")
    return EXIT_OK


def table1_rows(problem_name: str = "kepler", seeds=range(10), step_lengths=(1.0, 0.4, 0.1, 0.01),
                T: float = 10.0, ode: OdeSolverSpec = OdeSolverSpec("adams8", 4)) -> list[dict]:
    """``|h(Y_N) - 1.2|`` per scheme and step length over several seeds.

    Each seed drives every step length with the same Brownian path.
    Diverged runs are counted and left out of the mean and standard
    deviation.
    """
    problem = get_problem(problem_name)
    counts = [int(round(T / dt)) for dt in step_lengths]
    if any(abs(T / n - dt) > 1e-9 * dt for n, dt in zip(counts, step_lengths)):
        raise ConfigurationError("every step length must divide T")
    grids = [uniform_grid(T, n) for n in counts]
    h0 = problem.invariant_values(problem.initial_state)[0]
    schemes = [Scheme("em"), Scheme("jet", DT_JET, ode)]
    devs = {(s.label, dt): [] for s in schemes for dt in step_lengths}
    per_seed = [common_path(grids, problem.dim_noise, int(seed)) for seed in seeds]
    for j, (dt, grid) in enumerate(zip(step_lengths, grids)):
        # seeds are stacked into one batch; rows stay independent
        batch = BrownianPath(grid, np.stack([p[j].values for p in per_seed]), seed=-1)
        for scheme in schemes:
            traj = simulate(problem, scheme, batch, allow_divergence=True)
            h_end = traj.invariant_log[:, -1, 0]
            dev = np.where(traj.diverged, np.nan, np.abs(h_end - h0))
            devs[(scheme.label, dt)] = [float(d) for d in dev]
    rows = []
    for dt in step_lengths:
        for scheme in schemes:
            d = np.asarray(devs[(scheme.label, dt)])
            ok = d[np.isfinite(d)]
            rows.append({
                "step_length": float(dt),
                "scheme": scheme.label,
                "mean_abs_dev": float(np.mean(ok)) if ok.size else float("nan"),
                "sd_abs_dev": float(np.std(ok, ddof=1)) if ok.size > 1 else float("nan"),
                "n_seeds": int(d.size),
                "n_diverged": int(d.size - ok.size),
                "abs_dev": d.tolist(),
            })
    return rows


def _null_nans(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, list):
        return [_null_nans(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _null_nans(v) for k, v in obj.items()}
    return obj


def cmd_table1(args: argparse.Namespace) -> int:
    if args.n_seeds < 1:
        raise ConfigurationError("n-seeds must be positive")
    ode = OdeSolverSpec(args.ode, args.substeps)
    seeds = range(args.seed, args.seed + args.n_seeds)
    rows = table1_rows(args.problem, seeds, args.step_lengths, args.T, ode)
    os.makedirs(args.out, exist_ok=True)
    filename = os.path.join(args.out, f"table1.{args.format}")
    if args.format == "csv":
        with open(filename, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step_length", "scheme", "mean_abs_dev", "sd_abs_dev", "n_seeds", "n_diverged"])
            for r in rows:
                writer.writerow([repr(r["step_length"]), r["scheme"], repr(r["mean_abs_dev"]),
                                 repr(r["sd_abs_dev"]), r["n_seeds"], r["n_diverged"]])
    else:
        meta = {"problem": args.problem, "seeds": list(seeds), "rng": RNG_ID, "T": args.T,
                "jet_ode": ode.describe()}
        with open(filename, "w") as fh:
            json.dump({"metadata": meta, "rows": _null_nans(rows)}, fh, sort_keys=True, indent=2,
                      allow_nan=False)
            fh.write("\n")
    print(f"{'step':>6}  {'scheme':<20} {'mean |h-1.2|':>14} {'sd':>11}  diverged")
    for r in rows:
        print(f"{r['step_length']:>6g}  {r['scheme']:<20} {r['mean_abs_dev']:>14.4e} "
              f"{r['sd_abs_dev']:>11.3e}  {r['n_diverged']}/{r['n_seeds']}")
    print(f"-> {filename}")
    return EXIT_OK


def cmd_list_problems() -> int:
    for name in list_problems():
        p = get_problem(name)
        inv = ", ".join(p.invariant_names) or "-"
        print(f"{name:<18} n={p.dim_state} k={p.dim_noise} invariants: {inv}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "list-problems":
            return cmd_list_problems()
        if args.command == "table1":
            return cmd_table1(args)
        cfg = load_config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        return cmd_convergence(cfg)
    except (ConfigurationError, GridError) as exc:
        print(f"jetflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"jetflow: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
