"""Monte Carlo convergence measurements and log-log order fits.

Every estimator drives all grids with the same Brownian sample: each sample
is drawn on the coarsest grid and bridge-refined to the finer ones, so
increments shared between grids are never resampled. Samples are processed
in fixed-size chunks keyed by sample index, and chunk results are combined
in index order, which makes the output independent of the worker count.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .brownian import RNG_ID, BrownianPath, TimeGrid, refine, sample_path
from .errors import ConfigurationError, DivergenceError
from .ode_flow import OdeSolverSpec
from .schemes import DT_JET, Scheme, simulate
from .sde_model import SdeProblem, invariant_gradients

CHUNK_SIZE = 1000
MAX_DIVERGENT_FRACTION = 0.01
WEAK_SIGNAL_SE = 3.0
FLOOR_FACTOR = 10.0
# roundoff level used to estimate the noise floor of pathwise errors
_ROUNDOFF = 1e3 * np.finfo(float).eps

DEFAULT_REFERENCE_SCHEME = Scheme("jet", DT_JET, OdeSolverSpec("adams8", 4))
REFERENCE_REFINEMENT = 8


@dataclass
class OrderReport:
    """Errors per grid and the fitted convergence order.

    ``errors`` are on the natural scale of ``quantity`` (mean squared max
    error for strong errors, absolute bias for weak errors, mean squared max
    deviation for manifold drift); ``fitted_slope`` is on the scale named by
    ``slope_scale``.
    """

    quantity: str
    step_sizes: list
    errors: list
    std_errors: list
    fitted_slope: float
    fit_residual: float
    n_paths: int
    status: str = "ok"
    slope_scale: str = "log(error)"
    used_in_fit: list = field(default_factory=list)
    n_diverged: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("fitted_slope", "fit_residual"):
            if out[key] is not None and not math.isfinite(out[key]):
                out[key] = None
        return out

    def to_json(self, filename=None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent, sort_keys=True)
        if filename is not None:
            with open(filename, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, filename) -> None:
        with open(filename, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step_size", "error", "std_error", "used_in_fit", "n_diverged"])
            for row in zip(self.step_sizes, self.errors, self.std_errors, self.used_in_fit, self.n_diverged):
                writer.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])),
                                 int(row[3]), int(row[4])])


def fit_order(step_sizes, errors):
    """Least-squares slope of ``log(error)`` against ``log(step)``.

    Non-positive errors are dropped with a warning. Returns
    ``(slope, residual)`` where ``residual`` is the RMS deviation from the
    fitted line in natural-log units.
    """
    h = np.asarray(step_sizes, dtype=float)
    e = np.asarray(errors, dtype=float)
    if h.shape != e.shape:
        raise ValueError("step_sizes and errors must have the same length")
    keep = np.isfinite(e) & (e > 0) & (h > 0)
    if not np.all(keep):
        warnings.warn(f"excluding {int((~keep).sum())} non-positive error value(s) from the fit",
                      RuntimeWarning, stacklevel=2)
    if keep.sum() < 3:
        raise ValueError("at least three positive points are needed to fit an order")
    x, y = np.log(h[keep]), np.log(e[keep])
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return float(slope), residual


def worker_count(workers: Optional[int] = None) -> int:
    """Number of Monte Carlo workers, capped by ``JETFLOW_THREADS``."""
    cap = os.environ.get("JETFLOW_THREADS")
    n = workers if workers is not None else (int(cap) if cap else 1)
    if cap:
        n = min(n, int(cap))
    return max(1, int(n))


def _map_chunks(fn, n_paths: int, workers: Optional[int]):
    chunks = [(start, min(CHUNK_SIZE, n_paths - start)) for start in range(0, n_paths, CHUNK_SIZE)]
    n = worker_count(workers)
    if n == 1 or len(chunks) == 1:
        return [fn(*c) for c in chunks]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda c: fn(*c), chunks))


def _sorted_grids(grids: Sequence[TimeGrid]):
    grids = sorted(grids, key=lambda g: len(g))
    if len(grids) < 1:
        raise ConfigurationError("at least one grid is required")
    for coarse, fine in zip(grids, grids[1:]):
        try:
            fine.locate(coarse)
        except Exception as exc:
            raise ConfigurationError("grids must be nested for common random numbers") from exc
        if len(coarse) == len(fine):
            raise ConfigurationError("grids must be distinct")
    return grids


def nested_paths(grids: Sequence[TimeGrid], dim_noise: int, seed: int, n_paths: Optional[int] = None,
                 first_sample: int = 0) -> list[BrownianPath]:
    """One Brownian sample seen on each of the nested ``grids`` (coarse to fine)."""
    grids = _sorted_grids(grids)
    paths = [sample_path(grids[0], dim_noise, seed, n_paths, first_sample)]
    for grid in grids[1:]:
        paths.append(refine(paths[-1], grid))
    return paths


def subdivide(grid: TimeGrid, factor: int) -> TimeGrid:
    """Insert ``factor - 1`` equally spaced points into every interval of ``grid``."""
    t = grid.points
    frac = np.arange(factor) / factor
    inner = (t[:-1, None] + frac[None, :] * np.diff(t)[:, None]).ravel()
    return TimeGrid(np.append(inner, t[-1]))


def _noise_floor(reference_states):
    scale = np.nanmean(np.abs(reference_states)) if np.size(reference_states) else 1.0
    return float((_ROUNDOFF * max(1.0, scale)) ** 2)


def _metadata(problem, scheme, grids, seed, **extra):
    meta = {
        "problem": problem.name,
        "problem_params": {k: v for k, v in problem.params.items()},
        "scheme": scheme.describe(),
        "seed": int(seed),
        "rng": RNG_ID,
        "grids": [g.describe() for g in grids],
        "chunk_size": CHUNK_SIZE,
    }
    meta.update(extra)
    return meta


def _reduce(samples_per_grid, n_paths, what):
    """Mean, standard error and divergence count of per-path samples for each grid."""
    means, ses, bad = [], [], []
    for values in samples_per_grid:
        ok = np.isfinite(values)
        n_bad = int((~ok).sum())
        if n_bad > MAX_DIVERGENT_FRACTION * n_paths:
            raise DivergenceError(
                f"{what}: {n_bad} of {n_paths} paths diverged "
                f"(limit {MAX_DIVERGENT_FRACTION:.0%}); reduce the step size or check the problem"
            )
        v = values[ok]
        means.append(float(np.mean(v)))
        ses.append(float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan"))
        bad.append(n_bad)
    return means, ses, bad


def _fit_above(step_sizes, errors, threshold, transform=lambda e: e):
    errors = np.asarray(errors, dtype=float)
    used = errors > threshold
    if not np.any(used):
        return float("nan"), float("nan"), "floor", used
    if used.sum() < 3:
        return float("nan"), float("nan"), "inconclusive", used
    slope, resid = fit_order(np.asarray(step_sizes)[used], transform(errors[used]))
    return slope, resid, "ok", used


def strong_error(problem: SdeProblem, scheme: Scheme, grids: Sequence[TimeGrid], n_paths: int,
                 seed: int, reference: str = "analytic",
                 reference_scheme: Scheme = DEFAULT_REFERENCE_SCHEME,
                 workers: Optional[int] = None) -> OrderReport:
    """Estimate ``E[max_i |Y_i - X_i|^2]`` on each grid.

    Parameters
    ----------
    reference : {"analytic", "fine"} or Scheme
        ``"analytic"`` evaluates ``problem.analytic_solution`` on the same
        Brownian path; ``"fine"`` runs ``reference_scheme`` on a grid eight
        times finer than the finest measured grid, on a bridge refinement of
        the same path. A :class:`Scheme` is run on each measured grid itself,
        which compares two schemes pathwise.

    Notes
    -----
    The reported slope is on the root-mean-square scale, so Euler-Maruyama
    targets 1/2. Points within ten times the roundoff floor are left out of
    the fit.
    """
    grids = _sorted_grids(grids)
    if isinstance(reference, Scheme):
        reference_scheme, reference = reference, "scheme"
    elif reference not in ("analytic", "fine"):
        raise ConfigurationError("reference must be 'analytic', 'fine' or a Scheme")
    if reference == "analytic" and problem.analytic_solution is None:
        raise ConfigurationError(f"problem {problem.name!r} has no analytic solution")
    fine_grid = subdivide(grids[-1], REFERENCE_REFINEMENT) if reference == "fine" else None

    def chunk(start, count):
        paths = nested_paths(grids, problem.dim_noise, seed, count, start)
        if reference == "fine":
            fine_path = refine(paths[-1], fine_grid)
            ref_traj = simulate(problem, reference_scheme, fine_path, allow_divergence=True)
        out, floors = [], []
        for grid, path in zip(grids, paths):
            traj = simulate(problem, scheme, path, allow_divergence=True)
            if reference == "analytic":
                exact = problem.analytic_solution(problem.initial_state, grid.points[None, :, None],
                                                  path.values)
            elif reference == "fine":
                exact = ref_traj.states[:, fine_grid.locate(grid)]
            else:
                exact = simulate(problem, reference_scheme, path, allow_divergence=True).states
            with np.errstate(invalid="ignore"):
                sq = np.sum((traj.states - exact) ** 2, axis=-1)
                out.append(np.max(sq, axis=-1))
            floors.append(_noise_floor(exact))
        return out, floors

    results = _map_chunks(chunk, n_paths, workers)
    per_grid = [np.concatenate([r[0][g] for r in results]) for g in range(len(grids))]
    floor = max(max(r[1]) for r in results)
    means, ses, bad = _reduce(per_grid, n_paths, "strong error")
    steps = [g.max_step for g in grids]
    slope, resid, status, used = _fit_above(steps, means, FLOOR_FACTOR * floor, np.sqrt)
    ref_desc = {"kind": reference}
    if reference != "analytic":
        ref_desc["scheme"] = reference_scheme.describe()
    if reference == "fine":
        ref_desc["grid"] = fine_grid.describe()
    return OrderReport("strong_mse", steps, means, ses, slope, resid, n_paths, status,
                       "log(rms error)", used.tolist(), bad,
                       _metadata(problem, scheme, grids, seed, reference=ref_desc, noise_floor=floor))


def weak_error(problem: SdeProblem, scheme: Scheme, g: Callable, reference, grids: Sequence[TimeGrid],
               n_paths: int, seed: int, workers: Optional[int] = None) -> OrderReport:
    """Estimate ``|E[g(Y_N)] - E[g(X_T)]|`` on each grid.

    Parameters
    ----------
    g : callable
        Test function of the final state, ``(..., n) -> (...)``.
    reference : float or "pathwise"
        A known value of ``E[g(X_T)]``, or ``"pathwise"`` to average
        ``g(Y_N) - g(X_T)`` with ``X_T`` the analytic solution on the same
        Brownian path. Both estimate the same bias; the pathwise form has a
        much smaller standard error when the scheme converges strongly.

    Notes
    -----
    Only grids whose error exceeds three standard errors enter the fit. With
    fewer than three such grids the report has status ``"inconclusive"``
    (or ``"floor"`` if none) and a NaN slope.
    """
    grids = _sorted_grids(grids)
    pathwise = isinstance(reference, str)
    if pathwise and (reference != "pathwise" or problem.analytic_solution is None):
        raise ConfigurationError("reference must be a number, or 'pathwise' for problems with analytic solutions")

    def chunk(start, count):
        paths = nested_paths(grids, problem.dim_noise, seed, count, start)
        out = []
        for grid, path in zip(grids, paths):
            traj = simulate(problem, scheme, path, allow_divergence=True)
            with np.errstate(invalid="ignore"):
                val = np.asarray(g(traj.final), dtype=float)
                if pathwise:
                    exact = problem.analytic_solution(problem.initial_state, grid.T, path.values[:, -1])
                    val = val - np.asarray(g(exact), dtype=float)
            out.append(val)
        return out

    results = _map_chunks(chunk, n_paths, workers)
    per_grid = [np.concatenate([r[i] for r in results]) for i in range(len(grids))]
    means, ses, bad = _reduce(per_grid, n_paths, "weak error")
    offset = 0.0 if pathwise else float(reference)
    errors = [abs(m - offset) for m in means]
    steps = [gr.max_step for gr in grids]
    errors_arr, ses_arr = np.asarray(errors), np.asarray(ses)
    used = errors_arr > WEAK_SIGNAL_SE * ses_arr
    if used.sum() >= 3:
        slope, resid = fit_order(np.asarray(steps)[used], errors_arr[used])
        status = "ok"
    else:
        slope, resid = float("nan"), float("nan")
        status = "inconclusive"
    ref_desc = "pathwise analytic solution" if pathwise else float(reference)
    return OrderReport("weak_bias", steps, errors, ses, slope, resid, n_paths, status, "log(error)",
                       used.tolist(), bad, _metadata(problem, scheme, grids, seed, reference=ref_desc))


def invariant_distance(problem: SdeProblem, states) -> np.ndarray:
    """First-order distance from the invariant manifold through ``x0``.

    ``max_j |g_j(Y) - g_j(x0)| / max(1, |grad g_j(Y)|)``.
    """
    if not problem.invariants:
        raise ConfigurationError(f"problem {problem.name!r} registers no invariants")
    states = np.asarray(states, dtype=float)
    dev = np.abs(problem.invariant_values(states) - problem.invariant_values(problem.initial_state))
    finite = np.all(np.isfinite(states), axis=-1)
    safe = np.where(finite[..., None], states, problem.initial_state)
    grad = np.linalg.norm(invariant_gradients(problem, safe), axis=-1)
    grad = np.where(finite[..., None], grad, np.nan)
    return np.max(dev / np.maximum(1.0, grad), axis=-1)


def manifold_drift(problem: SdeProblem, scheme: Scheme, grids: Sequence[TimeGrid], n_paths: int,
                   seed: int, workers: Optional[int] = None) -> OrderReport:
    """Estimate ``E[max_i d(Y_i)^2]`` with ``d`` from :func:`invariant_distance`.

    The slope is on the squared scale, directly comparable with ``m - 2``
    for an m-good jet map.
    """
    grids = _sorted_grids(grids)
    if not problem.invariants:
        raise ConfigurationError(f"problem {problem.name!r} registers no invariants")

    def chunk(start, count):
        paths = nested_paths(grids, problem.dim_noise, seed, count, start)
        out, floors = [], []
        for path in paths:
            traj = simulate(problem, scheme, path, allow_divergence=True)
            with np.errstate(invalid="ignore"):
                d = invariant_distance(problem, traj.states)
                out.append(np.max(d, axis=-1) ** 2)
            floors.append(_noise_floor(traj.states[:, :1]))
        return out, floors

    results = _map_chunks(chunk, n_paths, workers)
    per_grid = [np.concatenate([r[0][g] for r in results]) for g in range(len(grids))]
    floor = max(max(r[1]) for r in results)
    means, ses, bad = _reduce(per_grid, n_paths, "manifold drift")
    steps = [g.max_step for g in grids]
    slope, resid, status, used = _fit_above(steps, means, FLOOR_FACTOR * floor)
    return OrderReport("manifold_drift_sq", steps, means, ses, slope, resid, n_paths, status,
                       "log(mean squared drift)", used.tolist(), bad,
                       _metadata(problem, scheme, grids, seed, noise_floor=floor))
