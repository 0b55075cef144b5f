"""SDE problem definitions and Itô/Stratonovich drift conversion.

All coefficient functions follow one array convention: states have shape
``(..., n)`` where the leading axes index independent samples, and time is a
plain float shared by the whole batch. Jacobians have shape ``(..., n, n)``
with ``J[..., i, j] = d f^i / d x^j``. Noise indices are zero-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalDomainError

StateFn = Callable[[np.ndarray, float], np.ndarray]
ColumnFn = Callable[[np.ndarray, float, int], np.ndarray]

_FD_STEP = np.cbrt(np.finfo(float).eps)


def finite_difference_jacobian(f: StateFn, x, t: float = 0.0) -> np.ndarray:
    """Central-difference Jacobian of ``f(x, t)`` with respect to ``x``.

    The step for component ``j`` is ``cbrt(eps) * max(1, |x_j|)``, chosen
    independently for every sample in the batch.

    Parameters
    ----------
    f : callable
        Vector field ``f(x, t) -> (..., n)``.
    x : array_like, shape (..., n)
        Evaluation point(s).
    t : float
        Time passed through to ``f``.

    Returns
    -------
    ndarray, shape (..., n_out, n)
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    h = _FD_STEP * np.maximum(1.0, np.abs(x))
    columns = []
    for j in range(n):
        step = np.zeros_like(x)
        step[..., j] = h[..., j]
        with np.errstate(all="ignore"):
            df = np.asarray(f(x + step, t)) - np.asarray(f(x - step, t))
        columns.append(df / (2.0 * h[..., j, None]))
    jac = np.stack(columns, axis=-1)
    if not np.all(np.isfinite(jac)):
        raise NumericalDomainError("non-finite values while differencing the vector field")
    return jac


def _batched_matvec(mat, vec):
    return np.einsum("...ij,...j->...i", mat, vec)


@dataclass(frozen=True)
class SdeProblem:
    """An Itô SDE ``dX = a(X,t) dt + sum_alpha b_alpha(X,t) dW^alpha``.

    Optional analytic pieces (Jacobians, Stratonovich drift, closed-form jet
    flows, pathwise solutions) are used when present; every Jacobian falls
    back to central finite differences otherwise.

    Parameters
    ----------
    name : str
        Identifier used in reports and output metadata.
    dim_state, dim_noise : int
        State dimension ``n`` and number of driving Brownian motions ``k``.
    drift_ito : callable
        ``a(x, t)``.
    diffusion : callable
        ``b(x, t, alpha)`` returning column ``alpha`` (zero-based).
    initial_state : array_like
        ``x0``.
    diffusion_jacobian : callable, optional
        ``db_alpha/dx`` as ``(x, t, alpha) -> (..., n, n)``.
    drift_strat : callable, optional
        Closed form of the Stratonovich drift, if known.
    drift_strat_jacobian : callable, optional
        ``(x, t) -> (..., n, n)``; needed by the expansion schemes.
    invariants : sequence of callables
        Conserved quantities ``g_j(x) -> (...)`` whose level sets through
        ``x0`` define the invariant manifold.
    exact_flow : callable, optional
        ``(x, t, v, kind, s) -> state``: closed-form time-``s`` flow of the
        jet vector field for ``kind`` in ``{"dt_jet", "dw2_jet"}``.
    analytic_solution : callable, optional
        ``(x0, t, w) -> X_t`` giving the exact solution as a function of
        the Brownian value ``w = W_t``.
    in_domain : callable, optional
        ``x -> bool array``; states outside the domain count as divergent.
    """

    name: str
    dim_state: int
    dim_noise: int
    drift_ito: StateFn
    diffusion: ColumnFn
    initial_state: np.ndarray
    diffusion_jacobian: Optional[Callable] = None
    drift_strat: Optional[StateFn] = None
    drift_strat_jacobian: Optional[Callable] = None
    invariants: tuple = ()
    invariant_names: tuple = ()
    exact_flow: Optional[Callable] = None
    analytic_solution: Optional[Callable] = None
    in_domain: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim_state) < 1 or int(self.dim_noise) < 1:
            raise ConfigurationError("dim_state and dim_noise must be positive")
        x0 = np.array(self.initial_state, dtype=float)
        if x0.shape != (self.dim_state,):
            raise ConfigurationError(
                f"initial_state has shape {x0.shape}, expected ({self.dim_state},)"
            )
        x0.setflags(write=False)
        object.__setattr__(self, "initial_state", x0)
        object.__setattr__(self, "invariants", tuple(self.invariants))
        names = tuple(self.invariant_names) or tuple(
            f"g{j + 1}" for j in range(len(self.invariants))
        )
        if len(names) != len(self.invariants):
            raise ConfigurationError("one name is required per invariant")
        object.__setattr__(self, "invariant_names", names)

    def diffusion_column_jacobian(self, x, t: float, alpha: int) -> np.ndarray:
        if self.diffusion_jacobian is not None:
            return np.asarray(self.diffusion_jacobian(x, t, alpha))
        return finite_difference_jacobian(lambda y, s: self.diffusion(y, s, alpha), x, t)

    def diffusion_matrix(self, x, t: float) -> np.ndarray:
        """All diffusion columns stacked as ``(..., n, k)``."""
        return np.stack([self.diffusion(x, t, a) for a in range(self.dim_noise)], axis=-1)

    def invariant_values(self, x) -> np.ndarray:
        """Invariants evaluated at ``x``, shape ``(..., m)``."""
        x = np.asarray(x, dtype=float)
        if not self.invariants:
            return np.zeros(x.shape[:-1] + (0,))
        return np.stack([np.asarray(g(x), dtype=float) for g in self.invariants], axis=-1)

    def within_domain(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ok = np.all(np.isfinite(x), axis=-1)
        if self.in_domain is not None:
            with np.errstate(invalid="ignore"):
                inside = np.asarray(self.in_domain(x), dtype=bool)
            if inside.shape == x.shape:
                inside = np.all(inside, axis=-1)
            ok &= inside
        return ok


def ito_correction(problem: SdeProblem, x, t: float) -> np.ndarray:
    """``1/2 sum_alpha (db_alpha/dx) b_alpha`` evaluated at ``x``."""
    x = np.asarray(x, dtype=float)
    total = np.zeros(np.broadcast_shapes(x.shape, (problem.dim_state,)))
    for alpha in range(problem.dim_noise):
        b = np.asarray(problem.diffusion(x, t, alpha))
        jac = problem.diffusion_column_jacobian(x, t, alpha)
        total = total + _batched_matvec(jac, b)
    return 0.5 * total


def _check_dimensions(problem: SdeProblem) -> None:
    x0, n = problem.initial_state, problem.dim_state
    if np.shape(problem.drift_ito(x0, 0.0)) != (n,):
        raise ConfigurationError("drift does not return a vector of length dim_state")
    for alpha in range(problem.dim_noise):
        if np.shape(problem.diffusion(x0, 0.0, alpha)) != (n,):
            raise ConfigurationError(f"diffusion column {alpha} has the wrong length")
        if np.shape(problem.diffusion_column_jacobian(x0, 0.0, alpha)) != (n, n):
            raise ConfigurationError(f"Jacobian of diffusion column {alpha} is not {n}x{n}")


@dataclass(frozen=True)
class StratonovichDrift:
    """Stratonovich drift ``abar(x, t)`` of a problem."""

    value: StateFn
    analytic: bool = False

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        return self.value(x, t)


def stratonovich_drift(problem: SdeProblem, use_analytic: bool = True) -> StratonovichDrift:
    """Convert the Itô drift to Stratonovich form.

    ``abar = a - 1/2 sum_alpha (db_alpha/dx) b_alpha``. If the problem
    carries a closed-form Stratonovich drift and ``use_analytic`` is true,
    that is returned instead of the converted one.
    """
    _check_dimensions(problem)
    if use_analytic and problem.drift_strat is not None:
        return StratonovichDrift(problem.drift_strat, analytic=True)

    def abar(x, t=0.0):
        return np.asarray(problem.drift_ito(x, t)) - ito_correction(problem, x, t)

    return StratonovichDrift(abar)


def ito_drift_from_stratonovich(abar: StratonovichDrift | StateFn, problem: SdeProblem) -> StateFn:
    """Inverse of :func:`stratonovich_drift`: ``a = abar + 1/2 sum (db/dx) b``."""
    _check_dimensions(problem)

    def drift(x, t=0.0):
        return np.asarray(abar(x, t)) + ito_correction(problem, x, t)

    return drift


def strat_drift_jacobian(problem: SdeProblem, x, t: float, abar: Optional[StratonovichDrift] = None):
    """``d abar / dx``, analytic when the problem supplies it."""
    if problem.drift_strat_jacobian is not None:
        return np.asarray(problem.drift_strat_jacobian(x, t))
    abar = abar if abar is not None else stratonovich_drift(problem)
    return finite_difference_jacobian(abar, x, t)


def invariant_gradients(problem: SdeProblem, x) -> np.ndarray:
    """Finite-difference gradients of all invariants, shape ``(..., m, n)``."""
    x = np.asarray(x, dtype=float)
    if not problem.invariants:
        return np.zeros(x.shape[:-1] + (0, problem.dim_state))
    return finite_difference_jacobian(lambda y, _t: problem.invariant_values(y), x, 0.0)


# -- registry ---------------------------------------------------------------

_REGISTRY: dict[str, Callable[..., SdeProblem]] = {}


def register_problem(name: str, factory: Callable[..., SdeProblem], overwrite: bool = False) -> None:
    """Register a problem factory under ``name`` for CLI selection."""
    if name in _REGISTRY and not overwrite:
        raise ConfigurationError(f"problem {name!r} is already registered")
    _REGISTRY[name] = factory


def get_problem(name: str, **params) -> SdeProblem:
    from . import problems  # noqa: F401  (registers the shipped problems)

    try:
        factory = _REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise ConfigurationError(f"unknown problem {name!r}; known problems: {known}") from None
    return factory(**params)


def list_problems() -> Sequence[str]:
    from . import problems  # noqa: F401

    return sorted(_REGISTRY)
