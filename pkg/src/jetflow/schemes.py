"""Stepping rules: Euler-Maruyama, flow-based jet schemes, expansion jet schemes.

A jet step maps ``Y_i`` to the time-1 flow of the frozen field

    X(x) = sum_alpha dW^alpha b_alpha(x, t_i) + c * abar(x, t_i)

with ``c = dt`` for the (dt)-jet and ``c = |dW|^2 / k`` for the (dW)^2-jet.
The expansion schemes replace the flow by its Taylor polynomial of degree
``r`` in ``v = (dt, dW)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .brownian import BrownianPath, TimeGrid
from .errors import ConfigurationError, DivergenceError, DomainError
from .ode_flow import OdeSolverSpec, VectorField, flow
from .sde_model import SdeProblem, StratonovichDrift, strat_drift_jacobian, stratonovich_drift

JET_KINDS = ("dt_jet", "dw2_jet")


@dataclass(frozen=True)
class JetVariant:
    """Choice of jet map: ``dt_jet``, ``dw2_jet`` or ``expansion`` of order 2 or 3."""

    kind: str = "dt_jet"
    order: Optional[int] = None
    base: str = "dt_jet"

    def __post_init__(self):
        if self.kind not in JET_KINDS + ("expansion",):
            raise ConfigurationError(f"unknown jet variant {self.kind!r}")
        if self.kind == "expansion":
            if self.order not in (2, 3):
                raise ConfigurationError("expansion order must be 2 or 3")
            if self.base not in JET_KINDS:
                raise ConfigurationError(f"expansion base must be one of {JET_KINDS}")

    @classmethod
    def expansion(cls, order: int, base: str = "dt_jet") -> "JetVariant":
        return cls("expansion", order, base)

    @property
    def label(self) -> str:
        if self.kind == "expansion":
            return f"expansion{self.order}-{self.base}"
        return self.kind


DT_JET = JetVariant("dt_jet")
DW2_JET = JetVariant("dw2_jet")


@dataclass(frozen=True)
class StepInput:
    """One step's data: state ``Y_i``, left time ``t_i``, ``dt_i`` and ``dW_i``."""

    state: np.ndarray
    t: float
    dt: float
    dW: np.ndarray

    def __post_init__(self):
        if not self.dt >= 0.0:
            raise ConfigurationError("dt must be non-negative")
        object.__setattr__(self, "state", np.asarray(self.state, dtype=float))
        object.__setattr__(self, "dW", np.asarray(self.dW, dtype=float))

    @property
    def v(self) -> np.ndarray:
        """``(dt, dW^1, ..., dW^k)`` with the batch shape of ``dW``."""
        dt = np.broadcast_to(self.dt, self.dW.shape[:-1] + (1,))
        return np.concatenate([dt, self.dW], axis=-1)


@dataclass(frozen=True)
class Scheme:
    """A complete stepping rule: Euler-Maruyama or a jet scheme with its solver."""

    kind: str = "jet"
    variant: JetVariant = DT_JET
    ode: OdeSolverSpec = OdeSolverSpec()

    def __post_init__(self):
        if self.kind not in ("em", "jet"):
            raise ConfigurationError(f"unknown scheme kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "em":
            return "em"
        if self.variant.kind == "expansion":
            return self.variant.label
        if self.ode.method == "exact":
            return f"{self.variant.kind}/exact"
        return f"{self.variant.kind}/{self.ode.method}x{self.ode.substeps}"

    def describe(self) -> dict:
        out = {"kind": self.kind, "label": self.label}
        if self.kind == "jet":
            out["variant"] = self.variant.label
            if self.variant.kind != "expansion":
                out["ode"] = self.ode.describe()
        return out


EM = Scheme("em")


def parse_scheme(name: str, ode: OdeSolverSpec = OdeSolverSpec(), base: str = "dt") -> Scheme:
    """Build a scheme from a short name.

    Accepted names: ``em``, ``jet-dt``, ``jet-dw2``, ``expansion-2`` and
    ``expansion-3`` (``base`` selects ``dt`` or ``dw2`` for expansions).
    """
    name = name.lower()
    if name == "em":
        return EM
    if name in ("jet-dt", "jet-dw2"):
        return Scheme("jet", JetVariant(name[4:] + "_jet"), ode)
    if name in ("expansion-2", "expansion-3"):
        if base not in ("dt", "dw2"):
            raise ConfigurationError("expansion base must be 'dt' or 'dw2'")
        return Scheme("jet", JetVariant.expansion(int(name[-1]), base + "_jet"))
    raise ConfigurationError(
        f"unknown scheme {name!r}; expected em, jet-dt, jet-dw2, expansion-2 or expansion-3"
    )


def _matvec(mat, vec):
    return np.einsum("...ij,...j->...i", mat, vec)


def _columns(problem: SdeProblem, x, t):
    return [np.asarray(problem.diffusion(x, t, a)) for a in range(problem.dim_noise)]


def euler_maruyama_step(problem: SdeProblem, inp: StepInput) -> np.ndarray:
    """``Y + a(Y,t) dt + sum_alpha b_alpha(Y,t) dW^alpha``."""
    y, t = inp.state, inp.t
    out = y + np.asarray(problem.drift_ito(y, t)) * inp.dt
    for alpha, b in enumerate(_columns(problem, y, t)):
        out = out + b * inp.dW[..., alpha, None]
    return out


def _drift_coefficient(kind: str, v: np.ndarray, k: int) -> np.ndarray:
    if kind == "dt_jet":
        return v[..., 0]
    if kind == "dw2_jet":
        return np.sum(v[..., 1:] ** 2, axis=-1) / k
    raise ConfigurationError(f"jet vector fields are defined for {JET_KINDS}, not {kind!r}")


def jet_vector_field(problem: SdeProblem, variant: JetVariant | str, t: float, v,
                     abar: Optional[StratonovichDrift] = None) -> VectorField:
    """The frozen field ``x -> sum v^alpha b_alpha(x,t) + c(v) abar(x,t)``.

    ``v`` is ``(v0, v1..vk)`` with optional leading batch axes matching the
    states the field will be applied to. The closed-form flow of the problem
    is attached when available.
    """
    kind = variant.kind if isinstance(variant, JetVariant) else variant
    v = np.asarray(v, dtype=float)
    k = problem.dim_noise
    if v.shape[-1] != k + 1:
        raise ConfigurationError(f"v must have {k + 1} components")
    c = _drift_coefficient(kind, v, k)
    abar = abar if abar is not None else stratonovich_drift(problem)

    c_col = c[..., None]
    v_cols = [v[..., alpha + 1, None] for alpha in range(k)]
    drift, column = abar.value, problem.diffusion

    def rhs(x):
        out = c_col * drift(x, t)
        for alpha, va in enumerate(v_cols):
            out += va * column(x, t, alpha)
        return out

    exact = None
    if problem.exact_flow is not None:
        def exact(x, s):
            return problem.exact_flow(x, t, v, kind, s)

    return VectorField(rhs, exact)


def jet_step(problem: SdeProblem, variant: JetVariant | str, spec: OdeSolverSpec, inp: StepInput,
             abar: Optional[StratonovichDrift] = None, check: bool = True) -> np.ndarray:
    """One flow-based jet step: the time-1 flow of the jet field from ``inp.state``."""
    field_ = jet_vector_field(problem, variant, inp.t, inp.v, abar)
    return flow(field_, inp.state, spec, check=check)


def jet_coefficients(problem: SdeProblem, base: str, x, t: float,
                     abar: Optional[StratonovichDrift] = None):
    """First and second ``v``-derivatives of the exact jet map at ``v = 0``.

    Returns
    -------
    first : ndarray, shape (..., n, k+1)
        ``d gamma / d v^i``; column 0 is the ``dt`` direction.
    second : ndarray, shape (..., n, k+1, k+1)
        ``d^2 gamma / d v^i d v^j``.
    """
    if base not in JET_KINDS:
        raise ConfigurationError(f"base must be one of {JET_KINDS}")
    x = np.asarray(x, dtype=float)
    k = problem.dim_noise
    abar = abar if abar is not None else stratonovich_drift(problem)
    fields = [np.asarray(abar(x, t))] + _columns(problem, x, t)
    jacs = [strat_drift_jacobian(problem, x, t, abar)] + [
        problem.diffusion_column_jacobian(x, t, a) for a in range(k)
    ]
    if base == "dw2_jet":
        fields[0] = np.zeros_like(fields[0])
        jacs[0] = np.zeros_like(jacs[0])
    first = np.stack(fields, axis=-1)
    # D c_j applied to c_i, indexed [..., :, i, j]
    dc = np.stack([np.stack([_matvec(jacs[j], fields[i]) for j in range(k + 1)], axis=-1)
                   for i in range(k + 1)], axis=-2)
    second = 0.5 * (dc + np.swapaxes(dc, -1, -2))
    if base == "dw2_jet":
        abar_x = np.asarray(abar(x, t))
        for a in range(1, k + 1):
            second[..., a, a] = second[..., a, a] + (2.0 / k) * abar_x
    return first, second


def finite_difference_jet(problem: SdeProblem, variant: JetVariant | str, x, t: float = 0.0,
                          spec: Optional[OdeSolverSpec] = None, h: float = 1e-4,
                          abar: Optional[StratonovichDrift] = None):
    """Value, gradient and Hessian in ``v`` at ``v = 0`` of the flow-based jet map.

    Central differences of :func:`jet_step` with step ``h`` in every
    component of ``v``. ``spec`` defaults to the closed-form flow when the
    problem has one and to adams8 with 16 substeps otherwise.

    Returns
    -------
    value : ndarray, shape (..., n)
    first : ndarray, shape (..., n, k+1)
    second : ndarray, shape (..., n, k+1, k+1)
    """
    x = np.asarray(x, dtype=float)
    kind = variant.kind if isinstance(variant, JetVariant) else variant
    if spec is None:
        spec = OdeSolverSpec("exact") if problem.exact_flow is not None else OdeSolverSpec("adams8", 16)
    abar = abar if abar is not None else stratonovich_drift(problem)
    m = problem.dim_noise + 1

    def gamma(v):
        v = np.broadcast_to(v, x.shape[:-1] + (m,))
        return flow(jet_vector_field(problem, kind, t, v, abar), x, spec)

    basis = np.eye(m) * h
    value = gamma(np.zeros(m))
    first = np.stack([(gamma(e) - gamma(-e)) / (2 * h) for e in basis], axis=-1)
    second = np.empty(x.shape + (m, m))
    for i in range(m):
        for j in range(i, m):
            if i == j:
                d2 = (gamma(basis[i]) - 2 * value + gamma(-basis[i])) / h**2
            else:
                ei, ej = basis[i], basis[j]
                d2 = (gamma(ei + ej) - gamma(ei - ej) - gamma(ej - ei) + gamma(-ei - ej)) / (4 * h**2)
            second[..., i, j] = second[..., j, i] = d2
    return value, first, second


def _directional_second(jac_fn, x, u):
    """``D^2 F(x)[u, u]`` by central differences of the Jacobian ``jac_fn``."""
    norm_u = np.linalg.norm(u, axis=-1, keepdims=True)
    scale = np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.linalg.norm(x, axis=-1, keepdims=True))
    safe = np.where(norm_u > 0, norm_u, 1.0)
    s = scale / safe
    plus = _matvec(jac_fn(x + s * u), u)
    minus = _matvec(jac_fn(x - s * u), u)
    return np.where(norm_u > 0, (plus - minus) / (2.0 * s), 0.0)


def _cubic_term(problem, base, x, t, v, abar):
    k = problem.dim_noise
    w = v[..., 1:]

    def jac_x1(y):
        total = sum(w[..., a, None, None] * problem.diffusion_column_jacobian(y, t, a) for a in range(k))
        if base == "dt_jet":
            total = total + v[..., 0, None, None] * strat_drift_jacobian(problem, y, t, abar)
        return total

    abar_x = np.asarray(abar(x, t))
    x1 = sum(w[..., a, None] * np.asarray(problem.diffusion(x, t, a)) for a in range(k))
    if base == "dt_jet":
        x1 = x1 + v[..., 0, None] * abar_x
    j1 = jac_x1(x)
    cubic = (_directional_second(jac_x1, x, x1) + _matvec(j1, _matvec(j1, x1))) / 6.0
    if base == "dw2_jet":
        c2 = (np.sum(w**2, axis=-1) / k)[..., None]
        x2 = c2 * abar_x
        dx2_x1 = c2 * _matvec(strat_drift_jacobian(problem, x, t, abar), x1)
        cubic = cubic + 0.5 * (_matvec(j1, x2) + dx2_x1)
    return cubic


def expansion_jet_step(problem: SdeProblem, r: int, base: str, inp: StepInput,
                       abar: Optional[StratonovichDrift] = None) -> np.ndarray:
    """Degree-``r`` Taylor polynomial in ``v`` of the exact jet map, at ``v = (dt, dW)``.

    The degree-2 part uses the closed-form 2-jet from :func:`jet_coefficients`.
    The cubic part is the third-order term of the flow's Lie series,
    ``(D^2X1[X1,X1] + DX1 DX1 X1)/6`` plus, for the (dW)^2 base,
    ``(DX1 X2 + DX2 X1)/2``, where ``X1`` and ``X2`` are the parts of the
    jet field linear and quadratic in ``v``.
    """
    if r not in (2, 3):
        raise ConfigurationError("expansion order must be 2 or 3")
    abar = abar if abar is not None else stratonovich_drift(problem)
    x, v = inp.state, inp.v
    first, second = jet_coefficients(problem, base, x, inp.t, abar)
    out = x + np.einsum("...ni,...i->...n", first, v)
    out = out + 0.5 * np.einsum("...nij,...i,...j->...n", second, v, v)
    if r == 3:
        out = out + _cubic_term(problem, base, x, inp.t, v, abar)
    return out


def step(problem: SdeProblem, scheme: Scheme, inp: StepInput,
         abar: Optional[StratonovichDrift] = None, check: bool = True) -> np.ndarray:
    """Dispatch one step of ``scheme``."""
    if scheme.kind == "em":
        return euler_maruyama_step(problem, inp)
    if scheme.variant.kind == "expansion":
        return expansion_jet_step(problem, scheme.variant.order, scheme.variant.base, inp, abar)
    return jet_step(problem, scheme.variant, scheme.ode, inp, abar, check=check)


@dataclass
class Trajectory:
    """Iterates ``Y_0..Y_N`` on a grid with the invariants logged at every step.

    For a batch, ``states`` has shape ``(P, N + 1, n)`` and ``diverged`` flags
    samples that produced a non-finite or out-of-domain state (their
    remaining entries are NaN).
    """

    grid: TimeGrid
    states: np.ndarray
    invariant_log: np.ndarray
    invariant_names: tuple = ()
    diverged: np.ndarray = field(default_factory=lambda: np.zeros((), dtype=bool))

    @property
    def final(self) -> np.ndarray:
        return self.states[..., -1, :]

    def invariant_deviation(self) -> np.ndarray:
        """``g_j(Y_i) - g_j(Y_0)`` for every step and invariant."""
        return self.invariant_log - self.invariant_log[..., :1, :]

    def to_csv(self, filename, extra_columns: Optional[dict] = None) -> None:
        """Write ``t, Y1..Yn, g1..gm`` (plus any extra named columns) for one path."""
        if self.states.ndim != 2:
            raise ValueError("CSV export is defined for single trajectories only")
        n = self.states.shape[-1]
        extra = extra_columns or {}
        header = ["t"] + [f"Y{i + 1}" for i in range(n)] + list(self.invariant_names) + list(extra)
        with open(filename, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i, t in enumerate(self.grid.points):
                row = [float(t)] + list(self.states[i]) + list(self.invariant_log[i])
                row += [np.asarray(col)[i] for col in extra.values()]
                writer.writerow([repr(float(val)) for val in row])


def simulate(problem: SdeProblem, scheme: Scheme, path: BrownianPath,
             allow_divergence: bool = False) -> Trajectory:
    """Iterate ``scheme`` over the grid of ``path`` starting at ``problem.initial_state``.

    Works on single paths and on batches. Unless ``allow_divergence`` is set,
    the first non-finite or out-of-domain state raises
    :class:`DivergenceError` (or :class:`DomainError`) whose ``partial``
    attribute is the trajectory up to the last good index.
    """
    if path.dim_noise != problem.dim_noise:
        raise ConfigurationError(
            f"path has {path.dim_noise} noise components, problem needs {problem.dim_noise}"
        )
    grid = path.grid
    dws = path.increments if path.batched else path.increments[None]
    n_paths, n_steps = dws.shape[0], grid.n_steps
    abar = stratonovich_drift(problem) if scheme.kind == "jet" else None

    states = np.full((n_paths, n_steps + 1, problem.dim_state), np.nan)
    states[:, 0] = problem.initial_state
    active = np.ones(n_paths, dtype=bool)
    t_points, dts = grid.points, grid.steps

    for i in range(n_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        inp = StepInput(states[idx, i], float(t_points[i]), float(dts[i]), dws[idx, i])
        with np.errstate(all="ignore"):
            new = step(problem, scheme, inp, abar, check=False)
        good = problem.within_domain(new)
        states[idx[good], i + 1] = new[good]
        if not np.all(good):
            if not allow_divergence:
                partial = _finish(problem, grid, states[:, : i + 1], active, path.batched)
                finite = np.all(np.isfinite(new[~good]))
                err = DomainError if finite else DivergenceError
                raise err(f"{scheme.label} left the domain of {problem.name!r} at step {i + 1}",
                          index=i, partial=partial)
            active[idx[~good]] = False

    return _finish(problem, grid, states, active, path.batched)


def _finish(problem, grid, states, active, batched):
    sub_grid = grid if states.shape[1] == len(grid) else TimeGrid(grid.points[: states.shape[1]])
    with np.errstate(all="ignore"):
        log = problem.invariant_values(states)
    traj = Trajectory(sub_grid, states, log, problem.invariant_names, ~active)
    if not batched:
        traj.states = states[0]
        traj.invariant_log = log[0]
        traj.diverged = np.asarray(not active[0])
    return traj
