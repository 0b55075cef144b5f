"""Fixed-step integrators for the time-``s`` flow of an autonomous vector field.

The jet schemes need ``Phi(x, 1)`` where ``dPhi/ds = X(Phi)``. Fields act on
batched states of shape ``(..., n)``; one call advances the whole batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DivergenceError

METHODS = ("exact", "rk4", "adams8", "euler")

# local truncation order p of each one-step rule; the resulting jet map is (p+1)-good
LOCAL_ORDER = {"euler": 1, "rk4": 4, "adams8": 8}


@dataclass(frozen=True)
class OdeSolverSpec:
    """Which integrator to use and how many internal steps to take over ``[0, s]``."""

    method: str = "rk4"
    substeps: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown ODE method {self.method!r}; expected one of {METHODS}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ConfigurationError("substeps must be a positive integer")

    @property
    def goodness(self) -> Optional[int]:
        """``m`` such that the approximate jet map is m-good (None for exact)."""
        if self.method == "exact":
            return None
        return LOCAL_ORDER[self.method] + 1

    def describe(self) -> dict:
        return {"method": self.method, "substeps": int(self.substeps)}


@dataclass(frozen=True)
class VectorField:
    """An autonomous field, optionally carrying its closed-form flow ``exact(x, s)``."""

    rhs: Callable[[np.ndarray], np.ndarray]
    exact: Optional[Callable[[np.ndarray, float], np.ndarray]] = None

    def __call__(self, x):
        return self.rhs(x)


def _poly_mul(p, q):
    out = [Fraction(0)] * (len(p) + len(q) - 1)
    for i, a in enumerate(p):
        for j, b in enumerate(q):
            out[i + j] += a * b
    return out


def _lagrange_integrals(nodes, lo=Fraction(0), hi=Fraction(1)):
    """Exact integrals over ``[lo, hi]`` of the Lagrange basis polynomials on ``nodes``."""
    weights = []
    for j, xj in enumerate(nodes):
        poly = [Fraction(1)]
        denom = Fraction(1)
        for m, xm in enumerate(nodes):
            if m != j:
                poly = _poly_mul(poly, [Fraction(-xm), Fraction(1)])
                denom *= xj - xm
        weights.append(sum(c * (hi ** (d + 1) - lo ** (d + 1)) / (d + 1) for d, c in enumerate(poly)) / denom)
    return weights


@lru_cache(maxsize=None)
def adams_coefficients(order: int = 8):
    """Adams-Bashforth and Adams-Moulton weights of the given order.

    Returns ``(ab, am)`` as tuples of Fractions. ``ab[j]`` multiplies
    ``f_{n-j}`` (j = 0..order-1); ``am[j]`` multiplies ``f_{n+1-j}``
    (j = 0..order-1).
    """
    ab = _lagrange_integrals([Fraction(-j) for j in range(order)])
    am = _lagrange_integrals([Fraction(1 - j) for j in range(order)])
    return tuple(ab), tuple(am)


@lru_cache(maxsize=None)
def _starter_weights(order: int = 8):
    """``w[j - 1][i]`` integrates the Lagrange basis on nodes ``0, -1, ..`` over ``[-j, 0]``."""
    nodes = [Fraction(-i) for i in range(order)]
    return tuple(tuple(float(c) for c in _lagrange_integrals(nodes, Fraction(-j), Fraction(0)))
                 for j in range(1, order))


_STARTER_SWEEPS = 4


@lru_cache(maxsize=None)
def _adams8_float_weights():
    ab, am = adams_coefficients(8)
    starter = np.array(_starter_weights(8)).T
    return (np.array([float(c) for c in ab]), np.array([float(c) for c in am]), starter)


def _check(x, states, check: bool):
    if check and not np.all(np.isfinite(x)):
        raise DivergenceError("non-finite state in ODE flow", index=len(states) - 1, partial=list(states))


def _rk4_step(field, x, h):
    k1 = field(x)
    k2 = field(x + 0.5 * h * k1)
    k3 = field(x + 0.5 * h * k2)
    k4 = field(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _one_step_flow(step, field, x0, duration, n, check):
    h = duration / n
    x = np.array(x0, dtype=float)
    states = [x]
    with np.errstate(all="ignore"):
        for _ in range(n):
            x = step(field, x, h)
            _check(x, states, check)
            states.append(x)
    return x


def _euler_step(field, x, h):
    return x + h * field(x)


def adams8_flow(field, x0, substeps: int = 4, duration: float = 1.0, check: bool = True):
    """Eighth-order Adams predictor-corrector (PECE) flow over ``[0, duration]``.

    The seven history values needed by the 8-step formulas sit at
    ``s = -h, ..., -7h``. They start from one backward RK4 step per
    interval and are then refined by fixed-point sweeps of the degree-7
    interpolating quadrature through all eight nodes. Each sweep gains one
    power of ``h |f'|``, so the starter matches the Adams local error after
    four sweeps. This keeps the method genuinely multistep even when
    ``substeps`` is below eight.
    """
    x = np.array(x0, dtype=float)
    if duration == 0.0:
        return x
    field = getattr(field, "rhs", field)
    h = duration / int(substeps)
    lead = (1,) * x.ndim
    ab, am, starter = (np.reshape(w, np.shape(w) + lead) for w in _adams8_float_weights())

    states = [x]
    with np.errstate(all="ignore"):
        f0 = field(x)
        back = [x]
        for _ in range(7):
            back.append(_rk4_step(field, back[-1], -h))
        _check(back[-1], states, check)
        # the seven back nodes sit on a new leading axis and are evaluated together;
        # sums over that axis run in a fixed order, so rows never mix
        back = np.stack(back[1:])
        history = np.concatenate([f0[None], field(back)])
        step = np.full(x.shape[:-1], np.inf)
        for _ in range(_STARTER_SWEEPS):
            new = x - h * np.sum(starter * history[:, None], axis=0)
            size = np.max(np.abs(new - back), axis=(0, -1))
            # rows where the sweep is not contracting keep their previous iterate
            accept = size < step
            if not np.any(accept):
                break
            back = np.where(accept[..., None], new, back)
            step = np.where(accept, size, step)
            history[1:] = field(back)
        _check(back[-1], states, check)
        # history[j] holds f at s = -j h
        for _ in range(int(substeps)):
            pred = x + h * np.sum(ab * history, axis=0)
            f_pred = field(pred)
            x = x + h * (am[0] * f_pred + np.sum(am[1:] * history[:7], axis=0))
            _check(x, states, check)
            states.append(x)
            history = np.concatenate([field(x)[None], history[:7]])
    return x


def flow(field, x0, spec: OdeSolverSpec = OdeSolverSpec(), duration: float = 1.0,
         check: bool = True) -> np.ndarray:
    """Approximate the time-``duration`` flow of ``field`` starting from ``x0``.

    Parameters
    ----------
    field : callable or VectorField
        Autonomous field ``x -> dx/ds`` acting on ``(..., n)`` arrays.
    x0 : array_like
        Initial state(s).
    spec : OdeSolverSpec
        Integrator choice. ``method="exact"`` requires ``field.exact``.
    duration : float
        Flow time ``s``; the jet schemes use 1.
    check : bool
        Raise :class:`DivergenceError` on non-finite states. Batched Monte
        Carlo callers disable this and mask divergent rows themselves.
    """
    if spec.method == "exact":
        exact = getattr(field, "exact", None)
        if exact is None:
            raise ConfigurationError("exact flow requested but the field has no closed-form flow")
        with np.errstate(all="ignore"):
            x = np.asarray(exact(np.asarray(x0, dtype=float), duration), dtype=float)
        _check(x, [np.asarray(x0, dtype=float)], check)
        return x
    if spec.method == "adams8":
        return adams8_flow(field, x0, spec.substeps, duration, check)
    step = _rk4_step if spec.method == "rk4" else _euler_step
    return _one_step_flow(step, field, x0, duration, int(spec.substeps), check)
