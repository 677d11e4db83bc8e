import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.descriptors import Free
from core.nets import init_params
from core.problems import example1, example3
from core.schemes import SCHEME_DEFAULTS, Scheme
from core.sde import TimeGrid
from core.train import (TERMINATION_REASONS, AdamState, DecayPolicy, NonFiniteGradient, PlateauState,
                        TrainConfig, adam_step, learning_rate, plateau_update, shard_bounds, step_schedule,
                        train)


def _free(values):
    params = init_params(Free(len(values)), 0)
    return params.with_theta(np.asarray(values, dtype=np.float64))


def test_adam_zero_gradient_keeps_parameters():
    params = _free([1.0, -2.0, 3.0])
    new, state = adam_step(params, np.zeros(3), AdamState(3), 0.1)
    assert_array_equal(new.theta, params.theta)
    assert state.k == 1


def test_adam_first_step_moves_by_gamma():
    params = _free([0.0, 0.0])
    new, state = adam_step(params, np.ones(2), AdamState(2), 0.1)
    assert_allclose(new.theta, -0.1, rtol=1e-7)
    assert_allclose(state.m, 0.1)
    assert_allclose(state.v, 0.001)


def test_adam_leaves_inputs_alone():
    params = _free([0.5])
    state = AdamState(1)
    adam_step(params, np.array([2.0]), state, 0.01)
    assert params.theta[0] == 0.5
    assert state.k == 0
    assert state.m[0] == 0.0


def test_adam_first_step_is_scale_invariant():
    params = _free([1.0, 1.0])
    one, _ = adam_step(params, np.array([1.0, -3.0]), AdamState(2), 0.01)
    two, _ = adam_step(params, np.array([2.0, -6.0]), AdamState(2), 0.01)
    step_one, step_two = one.theta - params.theta, two.theta - params.theta
    assert np.all(np.abs(step_two - step_one) <= 1e-6 * np.abs(step_one))


def test_adam_shrinks_a_quadratic():
    params = _free([3.0])
    state = AdamState(1)
    losses = [params.theta[0] ** 2]
    for _ in range(2):
        params, state = adam_step(params, 2.0 * params.theta, state, 0.1)
        losses.append(params.theta[0] ** 2)
    assert losses[0] > losses[1] > losses[2]


def test_adam_rejects_bad_gradients():
    params = _free([1.0, 2.0])
    with pytest.raises(NonFiniteGradient):
        adam_step(params, np.array([np.nan, 1.0]), AdamState(2), 0.1)
    with pytest.raises(ValueError):
        adam_step(params, np.ones(3), AdamState(2), 0.1)


def test_plateau_halves_on_stagnation():
    policy = DecayPolicy(gamma0=1e-3, gamma_min=1e-5)
    state, stop = plateau_update(PlateauState(1e-3), policy, [1.0] * 10)
    assert (state.gamma, stop) == (1e-3, False)
    state, stop = plateau_update(state, policy, [1.0] * 10)
    assert state.gamma == pytest.approx(5e-4)
    assert not stop


def test_plateau_holds_on_improvement():
    policy = DecayPolicy(gamma0=1e-3, gamma_min=1e-5)
    state, _ = plateau_update(PlateauState(1e-3), policy, [2.0] * 10)
    state, stop = plateau_update(state, policy, [1.0] * 10)
    assert state.gamma == 1e-3
    assert not stop


def test_plateau_halves_on_increase():
    policy = DecayPolicy(gamma0=1e-3, gamma_min=1e-5)
    state, _ = plateau_update(PlateauState(1e-3), policy, [1.0] * 10)
    state, _ = plateau_update(state, policy, [1.5] * 10)
    assert state.gamma == pytest.approx(5e-4)


def test_plateau_trace_to_stop():
    policy = DecayPolicy(gamma0=1e-3, gamma_min=2.5e-4)
    state, _ = plateau_update(PlateauState(1e-3), policy, [1.0] * 10)
    trace = list()
    for losses in ([1.0] * 10, [1.0] * 10, [0.5] * 10, [0.49] * 10, [0.5] * 10):
        state, stop = plateau_update(state, policy, losses)
        trace.append((state.gamma, state.stagnant, stop))
    assert_allclose([g for g, _, _ in trace], [5e-4, 2.5e-4, 2.5e-4, 2.5e-4, 2.5e-4], rtol=1e-15)
    assert [(s, stop) for _, s, stop in trace] == [(0, False), (0, False), (0, False), (1, False), (2, True)]


def test_plateau_never_below_gamma_min():
    policy = DecayPolicy(gamma0=1e-3, gamma_min=3e-4)
    state = PlateauState(1e-3, previous=1.0)
    for _ in range(6):
        state, _ = plateau_update(state, policy, [1.0])
        assert 3e-4 <= state.gamma <= 1e-3
    assert state.gamma == 3e-4


def test_policy_validation():
    with pytest.raises(ValueError):
        DecayPolicy('cosine')
    with pytest.raises(ValueError):
        DecayPolicy(gamma0=1e-5, gamma_min=1e-3)
    with pytest.raises(ValueError):
        DecayPolicy(period=1000, probe_every=300)
    assert DecayPolicy().probes == 10


@pytest.mark.parametrize('k, expected', [(1, 1e-3), (20000, 1e-3), (20001, 1e-4), (50000, 1e-4),
                                         (50001, 1e-5), (80000, 1e-5), (80001, 1e-6), (100000, 1e-6)])
def test_step_schedule(k, expected):
    assert step_schedule(k) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize('k', [0, 100001])
def test_step_schedule_range(k):
    with pytest.raises(ValueError):
        step_schedule(k)


def test_learning_rate_by_policy():
    state = PlateauState(2.5e-4)
    assert learning_rate(DecayPolicy('constant', gamma0=1e-2, gamma_min=1e-4), state, 5) == 1e-2
    assert learning_rate(DecayPolicy('step_schedule'), state, 30000) == pytest.approx(1e-4)
    assert learning_rate(DecayPolicy('plateau'), state, 5) == 2.5e-4
    warm = DecayPolicy('warm_then_plateau', gamma0=1e-3, warm_steps=100)
    assert learning_rate(warm, state, 100) == 1e-3
    assert learning_rate(warm, state, 101) == 2.5e-4


def test_shard_bounds_cover_the_batch():
    assert shard_bounds(10, 3) == [(0, 3), (3, 7), (7, 10)]
    assert shard_bounds(2, 4) == [(0, 1), (1, 2)]
    assert shard_bounds(64, 1) == [(0, 64)]


def _toy(scheme_kind='ladbsde', **policy):
    problem = example1(d=1, T=0.2)
    grid = TimeGrid(problem.T, 4)
    scheme = Scheme(scheme_kind, problem, grid, L=2, n=6)
    policy.setdefault('period', 10)
    policy.setdefault('probe_every', 5)
    policy.setdefault('validation_size', 64)
    policy = DecayPolicy(**policy)
    return problem, scheme, grid, policy


def test_training_is_deterministic():
    problem, scheme, grid, policy = _toy()
    config = TrainConfig(batch=16, seed=3, policy=policy, max_steps=20)
    first, one = train(problem, scheme, grid, config)
    second, two = train(problem, scheme, grid, config)
    assert first.theta.tobytes() == second.theta.tobytes()
    assert one.train_loss == two.train_loss
    assert one.val_loss == two.val_loss


def test_worker_count_does_not_change_the_result():
    problem, scheme, grid, policy = _toy('dbsde')
    results = list()
    for workers in (1, 4):
        config = TrainConfig(batch=16, seed=1, policy=policy, max_steps=10, shards=4, workers=workers)
        params, record = train(problem, scheme, grid, config)
        results.append((params.theta.tobytes(), record.train_loss))
    assert results[0] == results[1]


def test_record_layout_and_callbacks():
    problem, scheme, grid, policy = _toy()
    seen = list()
    config = TrainConfig(batch=8, seed=0, policy=policy, max_steps=20)
    _, record = train(problem, scheme, grid, config, on_checkpoint=lambda k, *rest: seen.append(k))
    assert seen == [10, 20]
    assert record.reason == 'max_steps'
    assert record.reason in TERMINATION_REASONS
    assert record.step_count == 20
    assert record.steps == list(range(1, 21))
    assert record.probe_steps == [0, 5, 10, 15, 20]
    rows = record.rows()
    assert len(rows) == 21
    assert rows[0][0] == 0 and np.isnan(rows[0][1]) and rows[0][2] == record.val_loss[0]
    assert np.isnan(rows[1][2]) and rows[5][2] == record.val_loss[1]
    assert record.wall_clock > 0.0


def test_zero_learning_rate_keeps_parameters():
    problem, scheme, grid, policy = _toy(kind='constant', gamma0=0.0, gamma_min=0.0)
    config = TrainConfig(batch=8, seed=2, policy=policy, max_steps=10)
    params, record = train(problem, scheme, grid, config)
    assert params.theta.tobytes() == scheme.init_params(2).theta.tobytes()
    assert len(set(record.val_loss)) == 1
    assert record.adam.k == 10


def test_plateau_stop_ends_the_run():
    problem, scheme, grid, policy = _toy(kind='plateau', gamma0=1e-12, gamma_min=1e-12, period=5)
    config = TrainConfig(batch=8, seed=0, policy=policy, max_steps=100)
    _, record = train(problem, scheme, grid, config)
    assert record.reason == 'plateau_stop'
    assert record.step_count == 15


def test_huge_learning_rate_is_not_converged():
    problem, scheme, grid, policy = _toy('dbsde', kind='constant', gamma0=1e12)
    config = TrainConfig(batch=8, seed=0, policy=policy, max_steps=50)
    _, record = train(problem, scheme, grid, config)
    assert record.reason == 'NC'
    assert record.step_count < 50


def test_validation_loss_halves_on_a_toy_problem():
    problem = example1(d=1, T=0.2)
    grid = TimeGrid(problem.T, 4)
    scheme = Scheme('ladbsde', problem, grid)
    policy = DecayPolicy('constant', gamma0=3e-3, gamma_min=1e-5, period=500, probe_every=100)
    _, record = train(problem, scheme, grid, TrainConfig(batch=64, seed=0, policy=policy, max_steps=500))
    assert record.val_loss[-1] <= 0.5 * record.val_loss[0]


@pytest.mark.slow
def test_reduced_scale_ladbsde_on_black_scholes_barenblatt():
    problem = example3(d=2)
    grid = TimeGrid(problem.T, 30)
    scheme = Scheme('ladbsde', problem, grid)
    y_errors, z_errors = list(), list()
    _, z_ref = problem.analytic(0.0, problem.x0[None, :])
    for seed in (1, 2, 3):
        policy = DecayPolicy('plateau', gamma0=1e-3, gamma_min=1e-5, max_steps=5000)
        params, _ = train(problem, scheme, grid, TrainConfig(batch=64, seed=seed, policy=policy))
        y0, z0 = scheme.initial_values(params)
        y_errors.append(abs(y0 - 1.5421) / 1.5421)
        z_errors.append(np.mean(np.abs(z0 - z_ref[0]) / np.abs(z_ref[0])))
    assert np.mean(y_errors) < 0.05
    assert np.mean(z_errors) < 0.10


@pytest.mark.slow
def test_reduced_scale_scheme_ordering():
    problem = example1(d=1)
    grid = TimeGrid(problem.T, 40)
    y_ref = problem.analytic(0.0, problem.x0[None, :])[0][0]
    wins = 0
    for seed in (1, 2, 3):
        errors = dict()
        for kind in ('dbsde', 'ldbsde', 'ladbsde'):
            scheme = Scheme(kind, problem, grid)
            defaults = SCHEME_DEFAULTS[scheme.kind]
            policy = DecayPolicy('plateau', gamma0=defaults['gamma0'], gamma_min=defaults['gamma_min'],
                                 max_steps=5000)
            params, record = train(problem, scheme, grid, TrainConfig(batch=64, seed=seed, policy=policy))
            y0, _ = scheme.initial_values(params)
            errors[kind] = np.inf if record.reason == 'NC' else abs(y0 - y_ref)
        if errors['ladbsde'] < errors['ldbsde'] and errors['dbsde'] > max(errors['ladbsde'], errors['ldbsde']):
            wins += 1
    assert wins >= 2
