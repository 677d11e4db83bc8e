import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.metrics import (LOSS_COLUMNS, REGRESSION_COLUMNS, T0_COLUMNS, RunEnsemble, RunResult,
                          analytic_trajectory, ensemble_loss, error_report, mean_loss, regression_errors,
                          t0_errors)
from core.problems import ProblemSpec, example1, example3, example4
from core.sde import TimeGrid, simulate


def _ensemble(*runs, d=2):
    return RunEnsemble('ladbsde', 'ex3', d, 4, runs)


def test_exact_runs_have_zero_error():
    ensemble = _ensemble(RunResult(1, 'max_steps', 1.5, [0.9, 0.2]), RunResult(2, 'max_steps', 1.5, [0.9, 0.2]))
    assert t0_errors(ensemble, 1.5, [0.9, 0.2]) == (0.0, 0.0, 0.0, 0.0)


def test_two_run_hand_arithmetic():
    ensemble = _ensemble(RunResult(1, 'max_steps', 1.1, [0.0, 0.0]), RunResult(2, 'max_steps', 0.7, [0.0, 0.0]))
    eps_y, sd_y, _, _ = t0_errors(ensemble, 1.0, [0.0, 0.0])
    assert eps_y == pytest.approx(0.2)
    assert sd_y == pytest.approx(0.1)
    _, sd_sample, _, _ = t0_errors(ensemble, 1.0, [0.0, 0.0], ddof=1)
    assert sd_sample == pytest.approx(0.1 * np.sqrt(2.0))


def test_z_error_averages_components_first():
    ensemble = _ensemble(RunResult(1, 'max_steps', 0.0, [0.1, -0.3]))
    _, _, eps_z, sd_z = t0_errors(ensemble, 0.0, [0.0, 0.0])
    assert eps_z == pytest.approx(0.2)
    assert sd_z == 0.0


def test_scalar_z_error_is_plain_mean_absolute_error():
    ensemble = _ensemble(RunResult(1, 'max_steps', 0.0, [0.5]), RunResult(2, 'max_steps', 0.0, [-0.1]), d=1)
    assert t0_errors(ensemble, 0.0, [0.2])[2] == pytest.approx(0.3)


def test_missing_z_reference():
    ensemble = _ensemble(RunResult(1, 'max_steps', 21.0, [0.1, 0.1]))
    eps_y, _, eps_z, sd_z = t0_errors(ensemble, 21.2988)
    assert eps_y == pytest.approx(0.2988)
    assert np.isnan(eps_z) and np.isnan(sd_z)


def test_errors_ignore_run_order():
    runs = [RunResult(s, 'max_steps', y, [y, -y]) for s, y in enumerate([0.3, 1.7, 0.9, 1.2])]
    one = t0_errors(_ensemble(*runs), 1.0, [1.0, -1.0])
    two = t0_errors(_ensemble(*reversed(runs)), 1.0, [1.0, -1.0])
    assert_allclose(one, two, rtol=1e-14)


def test_one_nc_run_marks_the_cell():
    ensemble = _ensemble(RunResult(1, 'max_steps', 1.0, [0.0, 0.0]), RunResult(2, 'NC'))
    assert ensemble.nc
    assert all(np.isnan(v) for v in t0_errors(ensemble, 1.0, [0.0, 0.0]))
    report = error_report(ensemble, example3(d=2), 1.0, [0.0, 0.0])
    assert report.status == 'NC'
    frame = report.t0_frame()
    assert list(frame.columns) == list(T0_COLUMNS)
    assert frame.loc[0, 'status'] == 'NC'
    assert np.isnan(frame.loc[0, 'eps_y0'])


def _two_sample_problem():
    """Y = x, Z = 0 on a one-dimensional problem without noise."""
    return ProblemSpec('line', 1, 1.0, [0.0], lambda t, x: np.ones_like(x),
                       sigma_diag=lambda t, x: np.zeros_like(x),
                       analytic=lambda t, x: (x[:, 0].copy(), np.zeros_like(x)))


def test_regression_errors_by_hand():
    problem = _two_sample_problem()
    paths = simulate(problem, TimeGrid(1.0, 2), 2, 0)
    # X = 0 at t_0 and 0.5 at t_1 for both samples
    Y = np.array([[0.1, 0.5], [-0.3, 0.9]])
    Z = np.array([[[0.2], [0.0]], [[0.0], [-0.4]]])
    result = regression_errors(_ensemble(RunResult(1, 'max_steps', Y=Y, Z=Z), d=1), paths, problem)
    assert_allclose(result['t_i'], [0.0, 0.5])
    assert_allclose(result['eps_y'], [0.2, 0.2])
    assert_allclose(result['eps_z'], [0.1, 0.2])
    assert_allclose(result['sd_y'], 0.0)


def test_constant_offset_gives_constant_regression_error():
    problem = example1(d=2)
    paths = simulate(problem, TimeGrid(problem.T, 5), 32, 1)
    Y, Z = analytic_trajectory(problem, paths)
    ensemble = _ensemble(RunResult(1, 'max_steps', Y=Y + 0.25, Z=Z), RunResult(2, 'max_steps', Y=Y - 0.25, Z=Z))
    result = regression_errors(ensemble, paths, problem)
    assert_allclose(result['eps_y'], 0.25, rtol=1e-12)
    assert np.all(result['eps_z'] < 1e-12)


def test_exact_trajectories_have_zero_regression_error():
    problem = example3(d=3)
    paths = simulate(problem, TimeGrid(problem.T, 4), 16, 2)
    Y, Z = analytic_trajectory(problem, paths)
    result = regression_errors(_ensemble(RunResult(1, 'max_steps', Y=Y, Z=Z), d=3), paths, problem)
    for key in ('eps_y', 'sd_y', 'eps_z', 'sd_z'):
        assert np.all(result[key] < 1e-12)


def test_mean_loss():
    steps = [0, 100, 200]
    s, mean, sd = mean_loss([(steps, [1.0, 1.0, 1.0]), (steps, [3.0, 3.0, 3.0])])
    assert_allclose(s, steps)
    assert_allclose(mean, 2.0)
    assert_allclose(sd, 1.0)
    _, _, sd = mean_loss([(steps, [1.0, 2.0, 3.0])] * 3)
    assert_allclose(sd, 0.0)


def test_mean_loss_over_many_traces():
    rng = np.random.default_rng(0)
    values = rng.uniform(size=(10, 6))
    steps = np.arange(6) * 100
    _, mean, sd = mean_loss([(steps, row) for row in values])
    assert_allclose(mean, values.sum(axis=0) / 10)
    assert_allclose(sd, np.sqrt(((values - values.mean(axis=0)) ** 2).sum(axis=0) / 10))


def test_misaligned_traces_are_rejected():
    with pytest.raises(ValueError):
        mean_loss([([0, 100], [1.0, 2.0]), ([0, 50], [1.0, 2.0])])
    with pytest.raises(ValueError):
        mean_loss([([0, 100], [1.0, 2.0]), ([0], [1.0])])
    with pytest.raises(ValueError):
        mean_loss([])


def test_ensemble_loss_uses_the_common_prefix():
    ensemble = _ensemble(RunResult(1, 'max_steps', probe_steps=[0, 100, 200], val_loss=[4.0, 2.0, 1.0]),
                         RunResult(2, 'plateau_stop', probe_steps=[0, 100], val_loss=[2.0, 2.0]))
    steps, mean, _ = ensemble_loss(ensemble)
    assert_allclose(steps, [0, 100])
    assert_allclose(mean, [3.0, 2.0])


def test_error_report_frames():
    problem = example1(d=1)
    paths = simulate(problem, TimeGrid(problem.T, 3), 8, 0)
    Y, Z = analytic_trajectory(problem, paths)
    y0, z0 = problem.analytic(0.0, problem.x0[None, :])
    run = RunResult(1, 'max_steps', y0[0], z0[0], Y, Z, [0, 100], [2.0, 1.0])
    report = error_report(_ensemble(run, d=1), problem, y0[0], z0[0], paths)
    assert report.status == 'ok'
    assert list(report.regression_frame().columns) == list(REGRESSION_COLUMNS)
    assert len(report.regression_frame()) == 3
    assert list(report.loss_frame().columns) == list(LOSS_COLUMNS)
    assert report.t0_frame().loc[0, 'eps_y0'] == 0.0


def test_no_regression_without_analytic_solution():
    problem = example4(d=2)
    paths = simulate(problem, TimeGrid(problem.T, 2), 4, 0)
    report = error_report(_ensemble(RunResult(1, 'max_steps', 21.0, [0.0, 0.0])), problem, 21.2988, None, paths)
    assert report.regression is None
    assert report.regression_frame().empty
    assert np.isnan(report.t0_frame().loc[0, 'eps_z0'])
