import numpy as np
from absl import logging

from . import autodiff as ad
from .descriptors import MLPConfig
from .nets import init_params, mlp_forward, mlp_param_count, param_count
from .problems import analytic_solution, example1, example2, example3
from .schemes import Scheme, SchemeKind
from .sde import TimeGrid, simulate
from .train import DecayPolicy, PlateauState, plateau_update, step_schedule


class CheckFailed(AssertionError):
    pass


def _expect(condition, message):
    if not condition:
        raise CheckFailed(message)


def _close(actual, expected, tol, what):
    _expect(np.allclose(actual, expected, atol=tol, rtol=0.0), f'{what}: got {actual}, expected {expected}')


def finite_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        out[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a)), np.max(np.abs(b))))


def check_analytic_values():
    y, z = analytic_solution(example1(d=1), 0.0, np.ones(1))
    _close([y, z[0]], [1.4687, -2.2874], 5e-5, 'example 1, d=1')
    y, z = analytic_solution(example1(d=100), 0.0, np.ones(100))
    _close([y, z[0]], [1.4217, 0.0835], 5e-5, 'example 1, d=100')
    y, z = analytic_solution(example2(), 0.0, np.zeros(100))
    _close([y, np.abs(z).max()], [0.8415, 0.0], 5e-5, 'example 2')
    for d, expected in ((2, 1.5421), (10, 7.7105), (50, 38.5524), (100, 77.1049)):
        problem = example3(d=d)
        y, z = analytic_solution(problem, 0.0, problem.x0)
        _close(y, expected, 5e-5, f'example 3, d={d}')
        _close(z[:2], [0.9869, 0.2467], 5e-5, f'example 3 Z, d={d}')


def check_param_counts():
    for d in (1, 2, 10, 50, 100):
        _expect(param_count('LDBSDE_original', d) == 256 * d + 198145, f'LDBSDE_original, d={d}')
        _expect(param_count('LaDBSDE', d) == 2 * d * d + 56 * d + 361, f'LaDBSDE, d={d}')
        # the published closed form undercounts its own layer sum
        true = MLPConfig(d + 1, 1, 4, d + 10).param_size()
        _expect(true == mlp_param_count(d + 1, 1, 4, d + 10) == 4 * d * d + 76 * d + 361,
                f'LaDBSDE layout size {true}, d={d}')
    _expect(param_count('DBSDE', 1, 2) == 191, 'DBSDE, d=1, N=2')
    ratio = param_count('LDBSDE_original', 100) / param_count('LaDBSDE', 100)
    _expect(8.5 <= ratio <= 9.0, f'ratio {ratio:.3f}')


def check_gradients(seed=7, trials=5, max_d0=8, max_L=4, max_n=16):
    """Parameter and input gradients of random MLPs against central differences."""
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        activation = ('tanh', 'sin', 'relu')[trial % 3]
        config = MLPConfig(int(rng.integers(1, max_d0 + 1)), 1, int(rng.integers(1, max_L + 1)),
                           int(rng.integers(2, max_n + 1)), activation)
        params = init_params(config, seed + trial, 'normal')
        x = rng.uniform(-2.0, 2.0, size=(3, config.d0))
        what = f'trial {trial}: {activation} MLP {config.d0}-{config.L}x{config.n}'

        def loss_of_theta(theta):
            return mlp_forward(config, params.with_theta(theta), x).data.sum()

        def loss_of_x(inputs):
            return mlp_forward(config, params, inputs).data.sum()

        tape = ad.Tape()
        theta = tape.leaf(params.theta.copy())
        out = ad.reduce_sum(mlp_forward(config, params.bind(theta), x))
        grad = ad.backward(out, [theta])[theta].data
        error = relative_error(grad, finite_difference(loss_of_theta, params.theta.copy()))
        _expect(error < 1e-5, f'{what}, parameter gradient relative error {error:.2e}')

        tape = ad.Tape()
        inputs = tape.leaf(x.copy())
        grad = ad.grad_wrt_input(ad.reduce_sum(mlp_forward(config, params, inputs)), inputs).data
        error = relative_error(grad, finite_difference(loss_of_x, x.copy()))
        _expect(error < 1e-5, f'{what}, input gradient relative error {error:.2e}')


def check_ladbsde_equivalence(seed=3):
    for problem in (example1(d=2, T=0.5), example3(d=2)):
        grid = TimeGrid(problem.T, 8)
        scheme = Scheme(SchemeKind.LaDBSDE, problem, grid)
        params = scheme.init_params(seed)
        paths = simulate(problem, grid, 16, seed)
        forward = scheme.loss(params, paths, training=False)
        scheme.algorithm = 'forward'
        backward = scheme.loss(params, paths, training=False)
        scheme.algorithm = 'backward'
        error = abs(forward.value - backward.value) / max(1.0, backward.value)
        _expect(error < 1e-10, f'{problem.name}: forward and backward losses differ by {error:.2e}')


def check_learning_rate_policies():
    policy = DecayPolicy(gamma0=1e-3, gamma_min=2.5e-4)
    state, _ = plateau_update(PlateauState(1e-3), policy, [1.0] * 10)
    for expected in (5e-4, 2.5e-4):
        state, stop = plateau_update(state, policy, [1.0] * 10)
        _close(state.gamma, expected, 1e-15, 'plateau halving')
        _expect(not stop, 'stopped while gamma was above gamma_min')
    state, stop = plateau_update(state, policy, [1.0] * 10)
    _expect(not stop, 'stopped after one stagnant period')
    state, stop = plateau_update(state, policy, [1.0] * 10)
    _expect(stop, 'no stop after two stagnant periods at gamma_min')
    for k, expected in ((1, 1e-3), (20000, 1e-3), (20001, 1e-4), (50001, 1e-5), (100000, 1e-6)):
        _close(step_schedule(k), expected, 1e-15, f'step schedule at k={k}')


CHECKS = {
    'analytic values': check_analytic_values,
    'parameter counts': check_param_counts,
    'gradients': check_gradients,
    'LaDBSDE forward/backward': check_ladbsde_equivalence,
    'learning-rate policies': check_learning_rate_policies,
}


def run_checks(names=None):
    failures = list()
    for name, check in CHECKS.items():
        if names and name not in names:
            continue
        try:
            check()
        except CheckFailed as e:
            logging.error('check %s failed: %s', name, e)
            failures.append((name, str(e)))
        else:
            logging.info('check %s passed', name)
    return failures
