import csv

import numpy as np
import pytest

from jetflow.analysis import fit_order
from jetflow.brownian import TimeGrid, sample_path, uniform_grid
from jetflow.errors import ConfigurationError, DivergenceError, DomainError
from jetflow.ode_flow import OdeSolverSpec
from jetflow.problems import circle_problem, gbm_problem, kepler_problem
from jetflow.schemes import (
    DT_JET,
    DW2_JET,
    EM,
    JetVariant,
    Scheme,
    StepInput,
    euler_maruyama_step,
    expansion_jet_step,
    finite_difference_jet,
    jet_coefficients,
    jet_step,
    jet_vector_field,
    parse_scheme,
    simulate,
)
from jetflow.sde_model import SdeProblem, get_problem

EXACT = OdeSolverSpec("exact")
ADAMS = OdeSolverSpec("adams8", 4)


def zero_problem(n=2, k=1):
    return SdeProblem("zero", n, k, lambda x, t: np.zeros_like(x), lambda x, t, a: np.zeros_like(x),
                      np.linspace(1.0, 2.0, n))


def kepler_states(n, seed=0):
    rng = np.random.default_rng(seed)
    x = np.array([1.0, 0.2, 1.0, 1.2]) + 0.2 * rng.standard_normal((n, 4))
    x[:, 0] = 0.6 + 0.8 * rng.random(n)
    return x


def test_step_input_validation():
    with pytest.raises(ConfigurationError):
        StepInput(np.zeros(1), 0.0, -0.1, np.zeros(1))
    inp = StepInput(np.zeros((3, 2)), 0.0, 0.5, np.ones((3, 2)))
    assert inp.v.shape == (3, 3)
    np.testing.assert_array_equal(inp.v[:, 0], 0.5)


def test_parse_scheme():
    assert parse_scheme("em") == EM
    assert parse_scheme("jet-dw2", ADAMS).variant == DW2_JET
    s = parse_scheme("expansion-3", base="dw2")
    assert s.variant == JetVariant.expansion(3, "dw2_jet")
    with pytest.raises(ConfigurationError):
        parse_scheme("milstein")
    with pytest.raises(ConfigurationError):
        JetVariant.expansion(4)


def test_em_zero_coefficients():
    y = np.array([0.3, 0.7])
    np.testing.assert_array_equal(euler_maruyama_step(zero_problem(), StepInput(y, 0.0, 0.1, [0.5])), y)


def test_em_gbm_arithmetic():
    p = gbm_problem(drift=0.1, sigma=0.25)
    out = euler_maruyama_step(p, StepInput([1.0], 0.0, 0.1, [0.2]))
    assert out[0] == pytest.approx(1.06, abs=1e-15)


def test_em_pure_multiplicative_noise():
    p = gbm_problem(drift=0.0, sigma=1.0)
    for x, dw in [(1.0, 0.5), (2.5, -0.3)]:
        assert euler_maruyama_step(p, StepInput([x], 0.0, 0.1, [dw]))[0] == pytest.approx(x + x * dw)


def test_jet_field_zero_v():
    field = jet_vector_field(get_problem("kepler"), DT_JET, 0.0, np.zeros(3))
    np.testing.assert_array_equal(field(kepler_states(5)), 0.0)


def test_jet_field_circle():
    p = circle_problem()
    x = np.array([[0.3, -0.8], [1.0, 2.0]])
    field = jet_vector_field(p, DT_JET, 0.0, [0.1, 0.7])
    np.testing.assert_allclose(field(x), 0.7 * np.stack([-x[:, 1], x[:, 0]], axis=-1), atol=1e-15)


def test_jet_field_gbm():
    p = gbm_problem(drift=0.13125, sigma=0.25)
    y = np.array([[0.5], [2.0]])
    field = jet_vector_field(p, DT_JET, 0.0, [0.1, 0.2])
    np.testing.assert_allclose(field(y), (0.1 * 0.1 + 0.25 * 0.2) * y, rtol=1e-12)


def test_jet_field_dw2_coefficient():
    p = get_problem("kepler")
    x = kepler_states(3)
    v = np.array([0.5, 0.3, -0.4])
    field = jet_vector_field(p, DW2_JET, 0.0, v)
    expect = 0.5 * (0.3**2 + 0.4**2) * p.drift_strat(x, 0.0)
    expect = expect + 0.3 * p.diffusion(x, 0.0, 0) - 0.4 * p.diffusion(x, 0.0, 1)
    np.testing.assert_allclose(field(x), expect, rtol=1e-12)


def test_jet_field_rejects_expansion_and_bad_v():
    p = circle_problem()
    with pytest.raises(ConfigurationError):
        jet_vector_field(p, "expansion", 0.0, [0.1, 0.2])
    with pytest.raises(ConfigurationError):
        jet_vector_field(p, DT_JET, 0.0, [0.1])


@pytest.mark.parametrize("variant", [DT_JET, DW2_JET])
def test_jet_step_zero_noise_and_time(variant):
    y = kepler_states(1)[0]
    out = jet_step(get_problem("kepler"), variant, ADAMS, StepInput(y, 0.0, 0.0, [0.0, 0.0]))
    np.testing.assert_array_equal(out, y)


def test_jet_step_gbm_exact():
    p = gbm_problem(drift=0.13125, sigma=0.25)
    out = jet_step(p, DT_JET, EXACT, StepInput([1.0], 0.0, 0.1, [0.2]))
    assert out[0] == pytest.approx(np.exp(0.06), rel=1e-14)
    assert np.exp(0.06) == pytest.approx(1.0618365, abs=1e-7)


def test_jet_step_circle_quarter_turn_exact():
    out = jet_step(circle_problem(), DT_JET, EXACT, StepInput([1.0, 0.0], 0.0, 0.1, [np.pi / 2]))
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)


@pytest.mark.parametrize("spec,tol", [(OdeSolverSpec("rk4", 4), 1e-8), (ADAMS, 1e-12)])
def test_jet_step_circle_norm_with_solvers(spec, tol):
    out = jet_step(circle_problem(), DT_JET, spec, StepInput([1.0, 0.0], 0.0, 0.01, [0.1]))
    np.testing.assert_allclose(out, [np.cos(0.1), np.sin(0.1)], atol=tol)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=tol)


def test_expansion_zero_v_is_identity():
    p = get_problem("kepler")
    x = kepler_states(4)
    for r in (2, 3):
        for base in ("dt_jet", "dw2_jet"):
            out = expansion_jet_step(p, r, base, StepInput(x, 0.0, 0.0, np.zeros((4, 2))))
            np.testing.assert_allclose(out, x, atol=1e-15)


def test_first_derivatives_are_diffusion_columns():
    p = get_problem("kepler")
    x = kepler_states(5)
    _, first, _ = finite_difference_jet(p, DT_JET, x)
    for a in range(2):
        np.testing.assert_allclose(first[..., a + 1], p.diffusion(x, 0.0, a), atol=1e-6)


@pytest.mark.parametrize("variant", [DT_JET, DW2_JET])
def test_two_jet_drift_identity_kepler(variant):
    p = kepler_problem()
    x = kepler_states(20, seed=1)
    _, first, second = finite_difference_jet(p, variant, x)
    drift = first[..., 0] + 0.5 * (second[..., 1, 1] + second[..., 2, 2])
    np.testing.assert_allclose(drift, p.drift_ito(x, 0.0), atol=1e-6)


@pytest.mark.parametrize("base", ["dt_jet", "dw2_jet"])
@pytest.mark.parametrize("name", ["kepler", "kepler-modulated", "gbm", "circle"])
def test_closed_form_jet_coefficients_match_flow(name, base):
    p = get_problem(name)
    rng = np.random.default_rng(2)
    x = p.initial_state + 0.1 * rng.standard_normal((6, p.dim_state))
    first, second = jet_coefficients(p, base, x, 0.0)
    _, fd_first, fd_second = finite_difference_jet(p, base, x)
    np.testing.assert_allclose(first, fd_first, atol=1e-6)
    np.testing.assert_allclose(second, fd_second, atol=1e-5)
    drift = first[..., 0] + 0.5 * np.einsum("...naa->...n", second[..., 1:, 1:])
    np.testing.assert_allclose(drift, p.drift_ito(x, 0.0), atol=1e-10)


def _expansion_defects(p, r, base, x, direction, spec):
    scales = 2.0 ** -np.arange(1, 9)
    errs = []
    for s in scales:
        v = s * direction
        inp = StepInput(x, 0.0, v[0], v[1:])
        exact = jet_step(p, base, spec, inp)
        errs.append(np.linalg.norm(expansion_jet_step(p, r, base, inp) - exact))
    return scales, np.array(errs)


@pytest.mark.parametrize("r", [2, 3])
@pytest.mark.parametrize("base", ["dt_jet", "dw2_jet"])
@pytest.mark.parametrize("name", ["kepler", "gbm", "circle", "disguised-linear"])
def test_expansion_matches_flow_to_order(name, base, r):
    p = get_problem(name)
    spec = EXACT if p.exact_flow is not None else OdeSolverSpec("adams8", 16)
    rng = np.random.default_rng(3)
    x = p.initial_state + 0.05 * rng.standard_normal(p.dim_state)
    direction = rng.standard_normal(p.dim_noise + 1)
    direction[0] = abs(direction[0])
    direction /= np.linalg.norm(direction)
    scales, errs = _expansion_defects(p, r, base, x, direction, spec)
    keep = errs > 1e-13
    slope, _ = fit_order(scales[keep], errs[keep])
    assert slope >= r + 1 - 0.3


def _proximity_slopes(p, n_half=5000):
    rng = np.random.default_rng(4)
    z = rng.standard_normal((n_half, p.dim_noise))
    # whitened antithetic sample: odd moments vanish and the covariance is exactly I,
    # so the O(dt) terms cancel in the sample mean as they do in expectation
    z = np.concatenate([z, -z])
    z = z @ np.linalg.inv(np.linalg.cholesky(z.T @ z / z.shape[0])).T
    x = np.broadcast_to(p.initial_state, (z.shape[0], p.dim_state))
    dts = 2.0 ** -np.arange(2, 8)
    means, norms = [], []
    for dt in dts:
        inp = StepInput(x, 0.0, dt, np.sqrt(dt) * z)
        diff = jet_step(p, DT_JET, ADAMS, inp) - euler_maruyama_step(p, inp)
        means.append(np.linalg.norm(diff.mean(axis=0)))
        norms.append(np.sqrt(np.mean(np.sum(diff**2, axis=-1))))
    return fit_order(dts, means)[0], fit_order(dts, norms)[0]


@pytest.mark.parametrize("name", ["circle", "gbm"])
def test_em_jet_proximity(name):
    """Mean of jet minus EM is O(dt^{3/2}) and its L2 norm is of exact order dt."""
    mean_slope, norm_slope = _proximity_slopes(get_problem(name))
    assert mean_slope >= 1.5 - 0.3
    assert abs(norm_slope - 1.0) <= 0.3


def test_em_jet_proximity_bounds_kepler():
    # the (db/dx) b term is small for Kepler, so only the O() bounds are checked
    mean_slope, norm_slope = _proximity_slopes(get_problem("kepler"))
    assert mean_slope >= 1.5 - 0.3
    assert norm_slope >= 1.0 - 0.3


def test_simulate_zero_problem_constant():
    p = zero_problem()
    path = sample_path(uniform_grid(1.0, 10), 1, seed=0)
    for scheme in (EM, Scheme("jet", DT_JET, ADAMS)):
        traj = simulate(p, scheme, path)
        np.testing.assert_array_equal(traj.states, np.broadcast_to(p.initial_state, (11, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_simulate_gbm_exact_matches_solution(seed):
    p = gbm_problem()
    path = sample_path(uniform_grid(1.0, 20), 1, seed)
    traj = simulate(p, Scheme("jet", DT_JET, EXACT), path)
    expect = np.exp(0.1 * 1.0 + 0.25 * path.values[-1, 0])
    assert traj.final[0] == pytest.approx(expect, rel=1e-12)


def test_simulate_kepler_conserves_h():
    p = get_problem("kepler")
    traj = simulate(p, Scheme("jet", DT_JET, ADAMS), sample_path(uniform_grid(10.0, 100), 2, seed=7))
    assert abs(traj.invariant_log[-1, 0] - 1.2) <= 0.01
    assert np.max(np.abs(traj.invariant_deviation())) < 1e-6


def test_simulate_kepler_modulated_keeps_h_near_constant():
    p = get_problem("kepler-modulated")
    traj = simulate(p, Scheme("jet", DW2_JET, ADAMS), sample_path(uniform_grid(10.0, 100), 2, seed=3))
    assert np.max(np.abs(traj.invariant_deviation())) < 1e-6


@pytest.mark.parametrize("scale", [0.1, 1.0, 3.0, 10.0])
def test_circle_exact_flow_preserved_for_any_noise_size(scale):
    p = circle_problem()
    path = sample_path(uniform_grid(scale**2, 50), 1, seed=1)
    traj = simulate(p, Scheme("jet", DT_JET, EXACT), path)
    assert np.max(np.abs(traj.invariant_deviation())) <= 1e-13


def test_circle_adams8_preserved_for_small_noise():
    p = circle_problem()
    traj = simulate(p, Scheme("jet", DT_JET, ADAMS), sample_path(uniform_grid(1.0, 200), 1, seed=1))
    assert np.max(np.abs(traj.invariant_deviation())) <= 1e-12


def test_batched_simulation_matches_single_paths():
    p = get_problem("kepler")
    batch = sample_path(uniform_grid(2.0, 20), 2, seed=5, n_paths=3)
    scheme = Scheme("jet", DT_JET, OdeSolverSpec("rk4", 2))
    traj = simulate(p, scheme, batch)
    assert traj.states.shape == (3, 21, 4)
    for i in range(3):
        np.testing.assert_array_equal(traj.states[i], simulate(p, scheme, batch.path(i)).states)


def _em_leaving_path():
    """A Kepler EM run at step 1 that drives r through zero."""
    p = get_problem("kepler")
    for seed in range(50):
        path = sample_path(uniform_grid(10.0, 10), 2, seed)
        if simulate(p, EM, path, allow_divergence=True).diverged:
            return p, path
    pytest.skip("no diverging seed found")


def test_divergence_carries_partial_trajectory():
    p, path = _em_leaving_path()
    with pytest.raises(DivergenceError) as info:
        simulate(p, EM, path)
    partial = info.value.partial
    assert partial.states.shape[0] == info.value.index + 1
    assert np.all(np.isfinite(partial.states))
    assert isinstance(info.value, DomainError) or not np.all(np.isfinite(partial.states))


def test_allow_divergence_masks_rows():
    p = get_problem("kepler")
    batch = sample_path(uniform_grid(10.0, 10), 2, seed=0, n_paths=20)
    traj = simulate(p, EM, batch, allow_divergence=True)
    assert traj.diverged.any() and not traj.diverged.all()
    assert np.all(np.isnan(traj.final[traj.diverged]))
    assert np.all(np.isfinite(traj.final[~traj.diverged]))


def test_simulate_checks_noise_dimension():
    with pytest.raises(ConfigurationError):
        simulate(get_problem("kepler"), EM, sample_path(uniform_grid(1.0, 4), 1, seed=0))


def test_trajectory_csv(tmp_path):
    p = circle_problem()
    path = sample_path(uniform_grid(1.0, 4), 1, seed=2)
    traj = simulate(p, Scheme("jet", DT_JET, EXACT), path)
    out = tmp_path / "traj.csv"
    traj.to_csv(out, {"W1": path.values[:, 0]})
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["t", "Y1", "Y2", "radius2", "W1"]
    data = np.array(rows[1:], dtype=float)
    np.testing.assert_array_equal(data[:, 1:3], traj.states)
    np.testing.assert_array_equal(data[:, 0], path.grid.points)
    assert open(out).read().endswith("\n")


def test_exact_jet_on_non_uniform_grid():
    p = gbm_problem()
    grid = TimeGrid(np.cumsum([0.0, 0.05, 0.3, 0.01, 0.14, 0.5]))
    path = sample_path(grid, 1, seed=2, n_paths=4)
    traj = simulate(p, Scheme("jet", DT_JET, OdeSolverSpec("exact")), path)
    exact = p.analytic_solution(p.initial_state, grid.points[:, None], path.values)
    np.testing.assert_allclose(traj.states, exact, rtol=1e-12)
    circle = simulate(circle_problem(), Scheme("jet", DT_JET, OdeSolverSpec("adams8", 4)),
                      sample_path(grid, 1, seed=2))
    np.testing.assert_allclose(circle.invariant_log[:, 0], 1.0, atol=1e-12)
