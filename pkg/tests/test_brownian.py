import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from jetflow.brownian import (
    RNG_ID,
    BrownianPath,
    TimeGrid,
    common_path,
    refine,
    sample_path,
    standard_normals,
    uniform_grid,
    union_grid,
)
from jetflow.errors import GridError
from jetflow.problems import gbm_problem
from jetflow.schemes import EM, simulate


def test_uniform_grid_points():
    np.testing.assert_array_equal(uniform_grid(1.0, 4).points, [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_array_equal(uniform_grid(1.0, 1).points, [0.0, 1.0])
    g = uniform_grid(10.0, 10)
    assert g.max_step == pytest.approx(1.0)
    assert g.n_steps == 10 and g.T == 10.0


@pytest.mark.parametrize("points", [[0.0], [0.1, 1.0], [0.0, 0.5, 0.5, 1.0], [0.0, 1.0, 0.5]])
def test_invalid_grids(points):
    with pytest.raises(GridError):
        TimeGrid(points)


def test_invalid_uniform_grid():
    with pytest.raises(GridError):
        uniform_grid(0.0, 4)
    with pytest.raises(GridError):
        uniform_grid(1.0, 0)


def test_nested_uniform_grids_share_points_exactly():
    coarse, fine = uniform_grid(10.0, 25), uniform_grid(10.0, 100)
    idx = fine.locate(coarse)
    np.testing.assert_array_equal(fine.points[idx], coarse.points)


def test_sample_path_deterministic():
    g = uniform_grid(1.0, 50)
    a, b = sample_path(g, 2, seed=11), sample_path(g, 2, seed=11)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample_path(g, 2, seed=12).values)
    np.testing.assert_array_equal(a.values[0], 0.0)


def test_batch_rows_equal_single_paths():
    g = uniform_grid(1.0, 8)
    batch = sample_path(g, 2, seed=5, n_paths=4, first_sample=10)
    for i in range(4):
        single = sample_path(g, 2, seed=5, first_sample=10 + i)
        np.testing.assert_array_equal(batch.values[i], single.values)
        np.testing.assert_array_equal(batch.path(i).values, single.values)


def test_terminal_moments():
    g = uniform_grid(1.0, 1)
    w = sample_path(g, 1, seed=2024, n_paths=100_000).values[:, -1, 0]
    assert abs(w.mean()) < 0.01
    assert abs(w.var() - 1.0) < 0.02


def test_increments_pass_ks_test():
    g = TimeGrid(np.cumsum(np.r_[0.0, np.linspace(0.01, 0.2, 100)]))
    path = sample_path(g, 1, seed=3, n_paths=100)
    z = (path.increments[..., 0] / np.sqrt(g.steps)).ravel()
    assert z.size == 10_000
    assert stats.kstest(z, "norm").pvalue > 0.001


def test_components_independent():
    path = sample_path(uniform_grid(1.0, 1), 3, seed=8, n_paths=50_000)
    c = np.corrcoef(path.increments[:, 0, :].T)
    assert np.all(np.abs(c[np.triu_indices(3, 1)]) < 0.02)


def test_normals_independent_of_batch_split():
    z_all = standard_normals(1, np.arange(10), 0, (3,))
    z_part = standard_normals(1, np.arange(5, 10), 0, (3,))
    np.testing.assert_array_equal(z_all[5:], z_part)
    assert RNG_ID


def test_refine_identity():
    path = sample_path(uniform_grid(1.0, 4), 1, seed=1)
    same = refine(path, uniform_grid(1.0, 4))
    np.testing.assert_array_equal(same.values, path.values)


def test_refine_keeps_old_values_bit_identical():
    path = sample_path(uniform_grid(2.0, 5), 2, seed=9, n_paths=3)
    fine = refine(path, uniform_grid(2.0, 40))
    back = fine.restrict(path.grid)
    np.testing.assert_array_equal(back.values, path.values)
    assert fine.generation == 1
    assert np.all(np.isfinite(fine.values))


def test_refine_deterministic():
    path = sample_path(uniform_grid(1.0, 2), 1, seed=4)
    a = refine(path, uniform_grid(1.0, 16))
    b = refine(path, uniform_grid(1.0, 16))
    np.testing.assert_array_equal(a.values, b.values)


def test_refine_requires_superset():
    path = sample_path(uniform_grid(1.0, 4), 1, seed=1)
    with pytest.raises(GridError):
        refine(path, uniform_grid(1.0, 3))
    with pytest.raises(GridError):
        refine(path, uniform_grid(2.0, 8))


def test_bridge_midpoint_law():
    path = sample_path(uniform_grid(1.0, 1), 1, seed=77, n_paths=100_000)
    mid = refine(path, uniform_grid(1.0, 2)).values[:, :, 0]
    resid = mid[:, 1] - 0.5 * (mid[:, 0] + mid[:, 2])
    assert abs(resid.mean()) < 0.01
    assert abs(resid.var() - 0.25) < 0.01


def test_refined_increments_have_correct_variance():
    path = sample_path(uniform_grid(1.0, 2), 1, seed=3, n_paths=20_000)
    fine = refine(path, TimeGrid([0.0, 0.1, 0.5, 0.7, 1.0]))
    var = fine.increments[..., 0].var(axis=0)
    np.testing.assert_allclose(var, fine.grid.steps, rtol=0.05)


@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_refinement_chain_consistency(n0, levels, seed):
    """A scheme on the coarse grid sees the same increments after any chain of refinements."""
    problem = gbm_problem()
    coarse = uniform_grid(1.0, n0)
    path = sample_path(coarse, 1, seed)
    refined = path
    for level in range(1, levels + 1):
        refined = refine(refined, uniform_grid(1.0, n0 * 2**level))
    a = simulate(problem, EM, path)
    b = simulate(problem, EM, refined.restrict(coarse))
    np.testing.assert_array_equal(a.states, b.states)


def test_union_and_common_path():
    grids = [uniform_grid(10.0, n) for n in (10, 25, 100)]
    u = union_grid(grids)
    assert len(u) == 101
    paths = common_path(grids, 2, seed=7)
    np.testing.assert_array_equal(paths[0].values, paths[2].restrict(grids[0]).values)
    np.testing.assert_array_equal(paths[1].values, paths[2].restrict(grids[1]).values)


def test_path_csv(tmp_path):
    path = sample_path(uniform_grid(1.0, 3), 2, seed=1)
    out = tmp_path / "w.csv"
    path.to_csv(out)
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["t", "W1", "W2"]
    assert len(rows) == 5
    np.testing.assert_array_equal(np.array(rows[1:], dtype=float)[:, 1:], path.values)
    with pytest.raises(ValueError):
        sample_path(uniform_grid(1.0, 3), 1, seed=1, n_paths=2).to_csv(out)


def test_path_validation():
    g = uniform_grid(1.0, 2)
    with pytest.raises(ValueError):
        BrownianPath(g, np.ones((3, 1)), seed=0)
    with pytest.raises(GridError):
        BrownianPath(g, np.zeros((4, 1)), seed=0)
    with pytest.raises(ValueError):
        sample_path(g, 0, seed=0)
