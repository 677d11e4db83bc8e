import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.problems import ProblemSpec, example1, geometric_brownian_motion
from core.rng import normal_at, standard_normals
from core.sde import (SimulationError, TimeGrid, convergence_slope, coarsen, euler_forward,
                      sample_increments, simulate, strong_error)


def test_time_grid():
    grid = TimeGrid(0.7, 7)
    assert grid.times[0] == 0.0
    assert grid.times[-1] == 0.7
    assert np.all(np.diff(grid.times) > 0)
    assert_allclose(np.diff(grid.times), 0.1, rtol=1e-12)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_increments_are_deterministic():
    grid = TimeGrid(1.0, 8)
    one = sample_increments(3, 16, grid, 2)
    two = sample_increments(3, 16, grid, 2)
    assert one.increments.tobytes() == two.increments.tobytes()
    assert one.increments.shape == (16, 8, 2)


def test_entries_regenerate_in_isolation():
    z = standard_normals(9, 4, 5, 3, 2)
    assert z[3, 2, 1] == pytest.approx(normal_at(9, 4, 3, 2, 1), rel=1e-13)
    shifted = standard_normals(9, 4, 2, 3, 2, first_sample=3)
    assert_allclose(shifted, z[3:5], rtol=1e-13)


def test_increment_variance():
    grid = TimeGrid(1.0, 100)
    dw = sample_increments(1, 1000, grid, 10).increments
    assert dw.var() == pytest.approx(grid.dt, rel=0.01)
    assert abs(dw.mean()) < 4 * np.sqrt(grid.dt / dw.size)


def test_neighbouring_seeds_are_uncorrelated():
    grid = TimeGrid(1.0, 100)
    a = sample_increments(5, 1000, grid, 10).increments.ravel()
    b = sample_increments(6, 1000, grid, 10).increments.ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_streams_are_uncorrelated():
    z = standard_normals(5, 1, 2000, 50, 10).ravel()
    w = standard_normals(5, 2, 2000, 50, 10).ravel()
    assert abs(np.corrcoef(z, w)[0, 1]) < 0.01


def test_no_motion_without_coefficients():
    problem = ProblemSpec('still', 3, 1.0, [1.0, 2.0, 3.0], lambda t, x: np.zeros_like(x),
                          sigma_diag=lambda t, x: np.zeros_like(x))
    paths = simulate(problem, TimeGrid(1.0, 10), 4, 0)
    assert_array_equal(paths.X, np.broadcast_to([1.0, 2.0, 3.0], (4, 11, 3)))


def test_additive_dynamics_are_exact():
    problem = example1(d=3, T=1.0)
    grid = TimeGrid(problem.T, 20)
    paths = simulate(problem, grid, 50, 2)
    mu, sigma = problem.params['mu'], problem.params['sigma']
    expected = problem.x0 + mu * problem.T + sigma * paths.brownian.terminal()
    assert_allclose(paths.X[:, -1, :], expected, atol=1e-12)
    assert_array_equal(paths.X[:, 0, :], np.broadcast_to(problem.x0, (50, 3)))


def test_full_sigma_matches_diagonal():
    diag = example1(d=2, T=1.0)
    full = ProblemSpec('full', 2, 1.0, diag.x0, diag.mu, sigma=lambda t, x: diag.sigma(t, x))
    grid = TimeGrid(1.0, 5)
    brownian = sample_increments(4, 8, grid, 2)
    assert_allclose(euler_forward(full, grid, brownian).X, euler_forward(diag, grid, brownian).X, atol=1e-14)


def test_dimension_mismatch_is_rejected():
    grid = TimeGrid(1.0, 4)
    with pytest.raises(ValueError):
        euler_forward(example1(d=2), grid, sample_increments(0, 3, grid, 3))


def test_non_finite_state_reports_samples():
    problem = ProblemSpec('blowup', 1, 1.0, 1.0, lambda t, x: x * 1e200, sigma_diag=lambda t, x: np.zeros_like(x))
    with pytest.raises(SimulationError) as info:
        simulate(problem, TimeGrid(1.0, 10), 3, 0)
    assert info.value.samples == (0, 1, 2)
    assert info.value.step >= 1


def test_coarsening_sums_fine_increments():
    fine = sample_increments(7, 4, TimeGrid(1.0, 8), 2)
    coarse = coarsen(fine, 4)
    assert coarse.grid.N == 2
    assert_allclose(coarse.increments[:, 0, :], fine.increments[:, :4, :].sum(axis=1))
    assert_allclose(coarse.terminal(), fine.terminal(), atol=1e-14)
    with pytest.raises(ValueError):
        coarsen(fine, 3)


def test_shards_keep_sample_ids():
    paths = simulate(example1(d=1), TimeGrid(2.0, 4), 10, 1)
    part = paths.shard(3, 7)
    assert part.M == 4
    assert_array_equal(part.brownian.stream_ids(), [3, 4, 5, 6])
    assert_array_equal(part.X, paths.X[3:7])


def test_deterministic_limit_has_order_one():
    problem = geometric_brownian_motion(mu=1.0, sigma=0.0)
    results = strong_error(problem, [8, 16, 32, 64], 10, seed=0)
    assert convergence_slope(results) == pytest.approx(1.0, abs=0.1)


def test_gbm_strong_order_one_half():
    problem = geometric_brownian_motion()
    results = strong_error(problem, [8, 16, 32, 64], 100000, seed=1)
    errors = [e for _, e in results]
    assert all(a > b for a, b in zip(errors, errors[1:]))
    assert 0.4 <= convergence_slope(results) <= 0.6


def test_slope_is_stable_in_sample_count():
    problem = geometric_brownian_motion()
    small = convergence_slope(strong_error(problem, [8, 16, 32, 64], 50000, seed=2))
    large = convergence_slope(strong_error(problem, [8, 16, 32, 64], 100000, seed=2))
    assert abs(small - large) < 0.05
