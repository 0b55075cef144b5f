"""Concrete SDE systems and the Itô push-forward along a diffeomorphism."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DomainError
from .sde_model import SdeProblem, finite_difference_jacobian, register_problem


def _matvec(mat, vec):
    return np.einsum("...ij,...j->...i", mat, vec)


# -- stochastic Kepler problem ----------------------------------------------

def _const(value):
    def xi(r):
        return np.full_like(np.asarray(r, dtype=float), value)

    return xi


@dataclass(frozen=True)
class KeplerParams:
    """Noise amplitudes, potential and initial data for the noisy Kepler problem.

    State is ``(r, p, theta, phi)`` with ``p = dr/dt`` and ``phi = dtheta/dt``.
    The default potential is ``V(r) = -1/r``, so ``V'(r) = 1/r**2``.
    """

    xi1: Callable = field(default_factory=lambda: _const(0.05))
    xi2: Callable = field(default_factory=lambda: _const(0.25))
    xi1_deriv: Callable = field(default_factory=lambda: _const(0.0))
    xi2_deriv: Callable = field(default_factory=lambda: _const(0.0))
    potential_deriv: Callable = lambda r: 1.0 / r**2
    potential_second_deriv: Optional[Callable] = lambda r: -2.0 / r**3
    initial: tuple = (1.0, 0.2, 1.0, 1.2)
    label: str = "constant"

    @classmethod
    def constant(cls, xi1: float = 0.05, xi2: float = 0.25, initial=(1.0, 0.2, 1.0, 1.2)):
        return cls(_const(xi1), _const(xi2), _const(0.0), _const(0.0), initial=tuple(initial),
                   label=f"constant(xi1={xi1}, xi2={xi2})")

    @classmethod
    def modulated(cls, xi1: float = 0.05, xi2: float = 0.25, initial=(1.0, 0.2, 1.0, 1.2)):
        """``xi_i(r) = c_i (1 + sin(r)**2)``."""
        return cls(
            lambda r: xi1 * (1.0 + np.sin(r) ** 2),
            lambda r: xi2 * (1.0 + np.sin(r) ** 2),
            lambda r: xi1 * np.sin(2.0 * r),
            lambda r: xi2 * np.sin(2.0 * r),
            initial=tuple(initial),
            label=f"modulated(xi1={xi1}, xi2={xi2})",
        )


def angular_momentum(x):
    """``h = r**2 * phi``."""
    x = np.asarray(x, dtype=float)
    return x[..., 0] ** 2 * x[..., 3]


def kepler_energy(x, potential=lambda r: -1.0 / r):
    """``(p**2 + r**2 phi**2)/2 + V(r)``; conserved only without noise."""
    x = np.asarray(x, dtype=float)
    r, p, phi = x[..., 0], x[..., 1], x[..., 3]
    return 0.5 * (p**2 + r**2 * phi**2) + potential(r)


def _unpack(x):
    x = np.asarray(x, dtype=float)
    r = x[..., 0]
    r = np.where(r > 0, r, np.nan)
    return r, x[..., 1], x[..., 2], x[..., 3]


def kepler_problem(params: KeplerParams = KeplerParams(), name: str = "kepler") -> SdeProblem:
    """The noisy Kepler system in Itô form with angular momentum as invariant."""
    if not params.initial[0] > 0:
        raise DomainError("the initial radius must be positive")
    xi1, xi2, dxi1, dxi2 = params.xi1, params.xi2, params.xi1_deriv, params.xi2_deriv
    dV = params.potential_deriv

    def drift_ito(x, t=0.0):
        r, p, _th, ph = _unpack(x)
        s1, d1 = xi1(r), dxi1(r)
        return np.stack([
            p + 0.5 * s1 * d1,
            -dV(r) + r * ph**2,
            ph,
            (-2.0 * ph * p - ph * s1 * d1) / r + 3.0 * ph * s1**2 / r**2,
        ], axis=-1)

    def drift_strat(x, t=0.0):
        r, p, _th, ph = _unpack(x)
        return np.stack([p, -dV(r) + r * ph**2, ph, -2.0 * ph * p / r], axis=-1)

    def diffusion(x, t, alpha):
        r, _p, _th, ph = _unpack(x)
        zero = np.zeros_like(r)
        if alpha == 0:
            s1 = xi1(r)
            return np.stack([s1, zero, zero, -2.0 * ph * s1 / r], axis=-1)
        if alpha == 1:
            return np.stack([zero, zero, xi2(r), zero], axis=-1)
        raise IndexError(alpha)

    def diffusion_jacobian(x, t, alpha):
        r, _p, _th, ph = _unpack(x)
        jac = np.zeros(r.shape + (4, 4))
        if alpha == 0:
            s1, d1 = xi1(r), dxi1(r)
            jac[..., 0, 0] = d1
            jac[..., 3, 0] = -2.0 * ph * (d1 * r - s1) / r**2
            jac[..., 3, 3] = -2.0 * s1 / r
        elif alpha == 1:
            jac[..., 2, 0] = dxi2(r)
        else:
            raise IndexError(alpha)
        jac[np.isnan(r)] = np.nan
        return jac

    strat_jac = None
    if params.potential_second_deriv is not None:
        d2V = params.potential_second_deriv

        def strat_jac(x, t=0.0):
            r, p, _th, ph = _unpack(x)
            jac = np.zeros(r.shape + (4, 4))
            jac[..., 0, 1] = 1.0
            jac[..., 1, 0] = -d2V(r) + ph**2
            jac[..., 1, 3] = 2.0 * r * ph
            jac[..., 2, 3] = 1.0
            jac[..., 3, 0] = 2.0 * ph * p / r**2
            jac[..., 3, 1] = -2.0 * ph / r
            jac[..., 3, 3] = -2.0 * p / r
            jac[np.isnan(r)] = np.nan
            return jac

    return SdeProblem(
        name=name,
        dim_state=4,
        dim_noise=2,
        drift_ito=drift_ito,
        diffusion=diffusion,
        initial_state=np.array(params.initial, dtype=float),
        diffusion_jacobian=diffusion_jacobian,
        drift_strat=drift_strat,
        drift_strat_jacobian=strat_jac,
        invariants=(angular_momentum,),
        invariant_names=("h",),
        in_domain=lambda x: np.asarray(x)[..., 0] > 0,
        params={"noise": params.label, "initial": list(params.initial)},
    )


# -- problems conjugate to drifted Brownian motion ---------------------------

def _numeric_derivative(fn):
    def deriv(z):
        z = np.asarray(z, dtype=float)
        h = np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(z))
        return (fn(z + h) - fn(z - h)) / (2.0 * h)

    return deriv


def disguised_linear_problem(F, G, mu: float, sigma: float, dF=None, d2F=None, y0: float = 1.0,
                             domain=None, name: str = "disguised-linear") -> SdeProblem:
    """One-dimensional SDE ``Y = F(X)`` with ``dX = mu dt + sigma dW``.

    By Itô's lemma ``dY = (mu F'(G(Y)) + sigma**2 F''(G(Y))/2) dt
    + sigma F'(G(Y)) dW`` where ``G`` inverts ``F``. The (dt)-jet flow and
    the pathwise solution are available in closed form.

    Parameters
    ----------
    F, G : callable
        Smooth invertible map and its inverse.
    dF, d2F : callable, optional
        First and second derivatives of ``F``; central differences otherwise.
    domain : callable, optional
        ``y -> bool`` marking where ``G`` is defined.
    """
    dF = dF if dF is not None else _numeric_derivative(F)
    d2F = d2F if d2F is not None else _numeric_derivative(dF)

    def _x(y):
        y = np.asarray(y, dtype=float)
        if domain is not None:
            with np.errstate(invalid="ignore"):
                y = np.where(domain(y), y, np.nan)
        return G(y)

    def drift_ito(y, t=0.0):
        x = _x(y)
        return mu * dF(x) + 0.5 * sigma**2 * d2F(x)

    def drift_strat(y, t=0.0):
        return mu * dF(_x(y))

    def diffusion(y, t, alpha):
        if alpha != 0:
            raise IndexError(alpha)
        return sigma * dF(_x(y))

    def diffusion_jacobian(y, t, alpha):
        if alpha != 0:
            raise IndexError(alpha)
        x = _x(y)
        return (sigma * d2F(x) / dF(x))[..., None]

    def strat_jacobian(y, t=0.0):
        x = _x(y)
        return (mu * d2F(x) / dF(x))[..., None]

    def exact_flow(y, t, v, kind, s=1.0):
        v = np.asarray(v, dtype=float)
        w = v[..., 1:2]
        c = v[..., 0:1] if kind == "dt_jet" else w**2
        return F(_x(y) + s * (sigma * w + c * mu))

    def analytic_solution(y_start, t, w):
        w = np.asarray(w, dtype=float)
        return F(mu * t + sigma * w + _x(y_start))

    return SdeProblem(
        name=name,
        dim_state=1,
        dim_noise=1,
        drift_ito=drift_ito,
        diffusion=diffusion,
        initial_state=np.array([y0], dtype=float),
        diffusion_jacobian=diffusion_jacobian,
        drift_strat=drift_strat,
        drift_strat_jacobian=strat_jacobian,
        exact_flow=exact_flow,
        analytic_solution=analytic_solution,
        in_domain=domain,
        params={"mu": mu, "sigma": sigma, "y0": y0},
    )


def gbm_problem(drift: float = 0.13125, sigma: float = 0.25, x0: float = 1.0) -> SdeProblem:
    """Geometric Brownian motion ``dX = drift X dt + sigma X dW``."""
    problem = disguised_linear_problem(
        np.exp, np.log, drift - 0.5 * sigma**2, sigma, dF=np.exp, d2F=np.exp, y0=x0,
        domain=lambda y: y > 0, name="gbm",
    )
    problem.params.update({"drift": drift})
    return problem


def sinh_problem(mu: float = 0.1, sigma: float = 0.25, y0: float = 0.5) -> SdeProblem:
    """Disguised-linear problem with ``F = sinh`` (defined on the whole line)."""
    return disguised_linear_problem(np.sinh, np.arcsinh, mu, sigma, dF=np.cosh, d2F=np.sinh, y0=y0,
                                    name="disguised-linear")


# -- Brownian motion on the unit circle -------------------------------------

_ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


def _rotate(x, angle):
    angle = np.asarray(angle, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    x = np.asarray(x, dtype=float)
    return np.stack([c * x[..., 0] - s * x[..., 1], s * x[..., 0] + c * x[..., 1]], axis=-1)


def circle_problem(x0=(1.0, 0.0)) -> SdeProblem:
    """``dX = -X/2 dt + J X dW`` with ``J`` the quarter rotation; stays on ``|X| = |x0|``."""

    def drift_ito(x, t=0.0):
        return -0.5 * np.asarray(x, dtype=float)

    def diffusion(x, t, alpha):
        if alpha != 0:
            raise IndexError(alpha)
        return np.asarray(x, dtype=float) @ _ROTATION.T

    def diffusion_jacobian(x, t, alpha):
        return np.broadcast_to(_ROTATION, np.shape(x)[:-1] + (2, 2)).copy()

    def drift_strat(x, t=0.0):
        return np.zeros(np.shape(x))

    def strat_jacobian(x, t=0.0):
        return np.zeros(np.shape(x)[:-1] + (2, 2))

    def exact_flow(x, t, v, kind, s=1.0):
        return _rotate(x, s * np.asarray(v, dtype=float)[..., 1])

    def analytic_solution(x_start, t, w):
        return _rotate(x_start, np.asarray(w, dtype=float)[..., 0])

    return SdeProblem(
        name="circle",
        dim_state=2,
        dim_noise=1,
        drift_ito=drift_ito,
        diffusion=diffusion,
        initial_state=np.array(x0, dtype=float),
        diffusion_jacobian=diffusion_jacobian,
        drift_strat=drift_strat,
        drift_strat_jacobian=strat_jacobian,
        invariants=(lambda x: np.sum(np.asarray(x, dtype=float) ** 2, axis=-1),),
        invariant_names=("radius2",),
        exact_flow=exact_flow,
        analytic_solution=analytic_solution,
    )


# -- change of coordinates ---------------------------------------------------

@dataclass(frozen=True)
class Diffeomorphism:
    """A smooth invertible change of coordinates with optional derivatives.

    ``jacobian(x)`` has shape ``(..., n, n)`` and ``hessian(x)`` has shape
    ``(..., n, n, n)`` with ``H[..., i, j, l] = d^2 f^i / dx^j dx^l``.
    """

    forward: Callable
    inverse: Callable
    jacobian: Optional[Callable] = None
    hessian: Optional[Callable] = None

    def jac(self, x) -> np.ndarray:
        if self.jacobian is not None:
            return np.asarray(self.jacobian(x))
        return finite_difference_jacobian(lambda y, _t: self.forward(y), x)

    def hess(self, x, finite_difference: bool = True) -> np.ndarray:
        if self.hessian is not None:
            return np.asarray(self.hessian(x))
        if not finite_difference:
            raise ConfigurationError("no Hessian supplied and finite differences are disabled")
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        flat = finite_difference_jacobian(lambda y, _t: self.jac(y).reshape(y.shape[:-1] + (n * n,)), x)
        return flat.reshape(x.shape[:-1] + (n, n, n))


def log_diffeomorphism() -> Diffeomorphism:
    """Componentwise logarithm on the positive orthant."""
    return Diffeomorphism(
        np.log, np.exp,
        jacobian=lambda x: np.eye(np.shape(x)[-1]) / np.asarray(x)[..., None, :],
    )


def pushforward(problem: SdeProblem, f: Diffeomorphism, finite_difference: bool = True) -> SdeProblem:
    """Transport ``problem`` to the coordinates ``y = f(x)`` by Itô's lemma.

    ``(f_* a)^i = J^i_j a^j + 1/2 H^i_{jl} b^j_alpha b^l_alpha`` and
    ``(f_* b_alpha)^i = J^i_j b^j_alpha``. Only Itô data is transported: the
    new problem computes its Stratonovich drift and Jacobians afresh, and
    carries no closed-form jet flow.
    """
    if f.hessian is None and not finite_difference:
        raise ConfigurationError("pushforward needs a Hessian or finite differences")
    k = problem.dim_noise

    def drift(y, t=0.0):
        x = f.inverse(np.asarray(y, dtype=float))
        jac, hess = f.jac(x), f.hess(x, finite_difference)
        out = _matvec(jac, np.asarray(problem.drift_ito(x, t)))
        for alpha in range(k):
            b = np.asarray(problem.diffusion(x, t, alpha))
            out = out + 0.5 * np.einsum("...ijl,...j,...l->...i", hess, b, b)
        return out

    def diffusion(y, t, alpha):
        x = f.inverse(np.asarray(y, dtype=float))
        return _matvec(f.jac(x), np.asarray(problem.diffusion(x, t, alpha)))

    invariants = tuple((lambda g: (lambda y: g(f.inverse(np.asarray(y, dtype=float)))))(g)
                       for g in problem.invariants)
    analytic = None
    if problem.analytic_solution is not None:
        def analytic(y_start, t, w):
            return f.forward(problem.analytic_solution(f.inverse(np.asarray(y_start, dtype=float)), t, w))

    in_domain = None
    if problem.in_domain is not None:
        def in_domain(y):
            return problem.in_domain(f.inverse(np.asarray(y, dtype=float)))

    return SdeProblem(
        name=f"{problem.name}|pushforward",
        dim_state=problem.dim_state,
        dim_noise=k,
        drift_ito=drift,
        diffusion=diffusion,
        initial_state=np.asarray(f.forward(problem.initial_state), dtype=float),
        invariants=invariants,
        invariant_names=problem.invariant_names,
        analytic_solution=analytic,
        in_domain=in_domain,
        params=dict(problem.params),
    )


# -- registry ----------------------------------------------------------------

def _kepler(xi1=0.05, xi2=0.25, initial=(1.0, 0.2, 1.0, 1.2)):
    return kepler_problem(KeplerParams.constant(xi1, xi2, initial), name="kepler")


def _kepler_modulated(xi1=0.05, xi2=0.25, initial=(1.0, 0.2, 1.0, 1.2)):
    return kepler_problem(KeplerParams.modulated(xi1, xi2, initial), name="kepler-modulated")


register_problem("kepler", _kepler, overwrite=True)
register_problem("kepler-modulated", _kepler_modulated, overwrite=True)
register_problem("gbm", gbm_problem, overwrite=True)
register_problem("disguised-linear", sinh_problem, overwrite=True)
register_problem("circle", circle_problem, overwrite=True)
