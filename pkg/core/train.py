import time
from concurrent.futures import ThreadPoolExecutor
from functools import reduce

import numpy as np
from absl import logging

from . import autodiff as ad
from .sde import TimeGrid, euler_forward, sample_increments

VALIDATION_STREAM = 0
# training steps use streams 1..max_steps
TEST_STREAM = 2 ** 62
POLICY_KINDS = ('plateau', 'step_schedule', 'constant', 'warm_then_plateau')
TERMINATION_REASONS = ('max_steps', 'plateau_stop', 'NC')
STEP_SCHEDULE_END = 100000


class NonFiniteGradient(FloatingPointError):
    pass


class AdamState:
    def __init__(self, size, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.k = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

    def copy(self):
        other = AdamState(self.m.size, self.beta1, self.beta2, self.epsilon)
        other.m = self.m.copy()
        other.v = self.v.copy()
        other.k = self.k
        return other


def adam_step(params, grads, state: AdamState, gamma):
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.theta.shape:
        raise ValueError(f'gradient shape {grads.shape} does not match parameters {params.theta.shape}')
    if not np.isfinite(grads).all():
        raise NonFiniteGradient(f'{np.count_nonzero(~np.isfinite(grads))} non-finite gradient entries')

    new = state.copy()
    new.k += 1
    new.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    new.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = new.m / (1.0 - state.beta1 ** new.k)
    v_hat = new.v / (1.0 - state.beta2 ** new.k)
    theta = params.theta - gamma * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params.with_theta(theta), new


class DecayPolicy:
    def __init__(self, kind='plateau', gamma0=1e-3, gamma_min=1e-5, period=1000, probe_every=100,
                 validation_size=1024, threshold=0.05, factor=0.5, patience=2,
                 warm_steps=30000, max_steps=60000):
        if kind not in POLICY_KINDS:
            raise ValueError(f'unknown learning-rate policy {kind!r}')
        if gamma_min > gamma0:
            raise ValueError(f'gamma_min {gamma_min} exceeds gamma0 {gamma0}')
        if period % probe_every != 0:
            raise ValueError(f'period {period} is not a multiple of probe_every {probe_every}')
        self.kind = kind
        self.gamma0 = gamma0
        self.gamma_min = gamma_min
        self.period = period
        self.probe_every = probe_every
        self.validation_size = validation_size
        self.threshold = threshold
        self.factor = factor
        self.patience = patience
        self.warm_steps = warm_steps
        self.max_steps = max_steps

    @property
    def probes(self):
        return self.period // self.probe_every

    @property
    def uses_plateau(self):
        return self.kind in ('plateau', 'warm_then_plateau')


class PlateauState:
    def __init__(self, gamma, previous=None, stagnant=0):
        self.gamma = gamma
        self.previous = previous
        self.stagnant = stagnant

    def __repr__(self):
        return f'PlateauState(gamma={self.gamma:g}, previous={self.previous}, stagnant={self.stagnant})'


def plateau_update(state: PlateauState, policy: DecayPolicy, losses):
    """Compare this period's mean validation loss with the last one.

    A relative improvement below the threshold (an increase included)
    halves gamma, floored at gamma_min. Once gamma sits at gamma_min,
    ``patience`` such periods in a row signal a stop. Returns (state, stop).
    """
    current = float(np.mean(losses))
    if state.previous is None:
        return PlateauState(state.gamma, current, state.stagnant), False

    previous = state.previous
    improvement = (previous - current) / previous if previous > 0 else 0.0
    gamma, stagnant = state.gamma, state.stagnant

    if improvement < policy.threshold:
        if gamma <= policy.gamma_min * (1.0 + 1e-12):
            stagnant += 1
        else:
            gamma = max(gamma * policy.factor, policy.gamma_min)
            stagnant = 0
    else:
        stagnant = 0

    return PlateauState(gamma, current, stagnant), stagnant >= policy.patience


def step_schedule(k):
    """10^(1[k <= 20000] + 1[k <= 50000] + 1[k <= 80000] - 6) for k = 1..100000."""
    if not 1 <= k <= STEP_SCHEDULE_END:
        raise ValueError(f'step {k} outside 1..{STEP_SCHEDULE_END}')
    exponent = int(k <= 20000) + int(k <= 50000) + int(k <= 80000) - 6
    return 10.0 ** exponent


def learning_rate(policy: DecayPolicy, state: PlateauState, k):
    if policy.kind == 'constant':
        return policy.gamma0
    if policy.kind == 'step_schedule':
        return step_schedule(k)
    if policy.kind == 'warm_then_plateau' and k <= policy.warm_steps:
        return policy.gamma0
    return state.gamma


class TrainConfig:
    def __init__(self, batch=64, seed=0, policy=None, max_steps=None, shards=1, workers=1,
                 init='uniform', log_every=100):
        self.batch = batch
        self.seed = seed
        self.policy = policy or DecayPolicy()
        self.max_steps = self.policy.max_steps if max_steps is None else max_steps
        self.shards = shards
        self.workers = workers
        self.init = init
        self.log_every = log_every


class TrainRecord:
    def __init__(self):
        self.steps = list()
        self.train_loss = list()
        self.lr = list()
        self.probe_steps = list()
        self.val_loss = list()
        self.wall_clock = 0.0
        self.step_count = 0
        self.reason = None
        self.adam = None
        self.bn_states = None

    def rows(self):
        probes = dict(zip(self.probe_steps, self.val_loss))
        rows = list()
        if 0 in probes:
            rows.append((0, np.nan, probes[0], np.nan))
        for step, loss, lr in zip(self.steps, self.train_loss, self.lr):
            rows.append((step, loss, probes.get(step, np.nan), lr))
        return rows


def shard_bounds(M, shards):
    edges = np.linspace(0, M, shards + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def loss_and_gradient(scheme, params, paths, bn_states=None, shards=1, pool=None):
    """Loss value and d loss / d theta of one mini-batch, reduced in shard order.

    Every shard is evaluated on its own tape. The reduction order is fixed by
    the shard index, so the worker count never changes the result.
    """
    M = paths.M
    weighted = scheme.reduction == 'mean'

    def run(bounds):
        a, b = bounds
        tape = ad.Tape()
        theta = tape.leaf(params.theta, name='theta')
        stats = list()
        loss = scheme.loss(params.bind(theta), paths.shard(a, b), bn_states, training=True, stats=stats)
        grad = ad.backward(loss.total, [theta])[theta].data
        weight = (b - a) / M if weighted else 1.0
        return weight * loss.value, weight * grad, loss.diverged, stats

    bounds = shard_bounds(M, shards)
    results = list(pool.map(run, bounds)) if pool is not None else [run(b) for b in bounds]

    value = reduce(lambda acc, r: acc + r[0], results, 0.0)
    grad = reduce(np.add, [r[1] for r in results])
    diverged = any(r[2] for r in results)
    stats = [s for r in results for s in r[3]]
    return value, grad, diverged, stats


def _apply_batch_stats(bn_states, stats):
    for key, batch_mean, batch_var in stats:
        bn_states[key].update(batch_mean, batch_var)


def train(problem, scheme, grid: TimeGrid, config: TrainConfig, on_checkpoint=None):
    """Minimise the scheme loss with Adam; returns (params, TrainRecord).

    Step k draws a fresh batch from stream k of ``config.seed``; the
    validation batch (stream 0) is drawn once. ``on_checkpoint(k, params,
    adam, bn_states, record)`` is called at every period boundary.
    """
    policy = config.policy
    record = TrainRecord()
    started = time.perf_counter()

    params = scheme.init_params(config.seed, config.init)
    bn_states = scheme.init_state()
    adam = AdamState(len(params))
    plateau = PlateauState(policy.gamma0)
    probes = list()

    validation = euler_forward(problem, grid, sample_increments(
        config.seed, policy.validation_size, grid, problem.d, VALIDATION_STREAM))

    def validate():
        return scheme.loss(params, validation, bn_states, training=False).value

    record.probe_steps.append(0)
    record.val_loss.append(validate())
    logging.info('%s on %s: rho=%d, initial validation loss %.4e',
                 scheme.name, problem.name, len(params), record.val_loss[0])

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 and config.shards > 1 else None
    reason = 'max_steps'
    try:
        for k in range(1, config.max_steps + 1):
            gamma = learning_rate(policy, plateau, k)
            paths = euler_forward(problem, grid, sample_increments(
                config.seed, config.batch, grid, problem.d, stream=k))
            value, grad, diverged, stats = loss_and_gradient(
                scheme, params, paths, bn_states, config.shards, pool)
            if diverged or not np.isfinite(value):
                logging.warning('step %d: loss diverged (%.4e), stopping as NC', k, value)
                reason = 'NC'
                break
            try:
                params, adam = adam_step(params, grad, adam, gamma)
            except NonFiniteGradient as e:
                logging.warning('step %d: Adam step rejected: %s', k, e)
                reason = 'NC'
                break
            _apply_batch_stats(bn_states, stats)

            record.steps.append(k)
            record.train_loss.append(value)
            record.lr.append(gamma)
            record.step_count = k

            if k % policy.probe_every == 0:
                v = validate()
                record.probe_steps.append(k)
                record.val_loss.append(v)
                if not np.isfinite(v):
                    logging.warning('step %d: validation loss is not finite, stopping as NC', k)
                    reason = 'NC'
                    break
                probes.append(v)

            if k % config.log_every == 0:
                logging.info('step %6d  loss %.4e  val %.4e  lr %.1e  %.1fs', k, value,
                             record.val_loss[-1], gamma, time.perf_counter() - started)

            if k % policy.period == 0:
                if policy.kind == 'warm_then_plateau' and k <= policy.warm_steps:
                    plateau = PlateauState(policy.gamma0)
                elif policy.uses_plateau:
                    plateau, stop = plateau_update(plateau, policy, probes[-policy.probes:])
                    if plateau.gamma < gamma:
                        logging.info('step %d: loss plateau, learning rate %.1e -> %.1e', k, gamma, plateau.gamma)
                    if stop:
                        logging.info('step %d: no further improvement at gamma_min, stopping', k)
                        reason = 'plateau_stop'
                probes.clear()
                if on_checkpoint is not None:
                    on_checkpoint(k, params, adam, bn_states, record)
                if reason == 'plateau_stop':
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    record.reason = reason
    record.wall_clock = time.perf_counter() - started
    record.adam = adam
    record.bn_states = bn_states
    logging.info('%s finished after %d steps (%s), validation loss %.4e, %.1fs', scheme.name,
                 record.step_count, reason, record.val_loss[-1], record.wall_clock)
    return params, record
