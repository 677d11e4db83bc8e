"""Experiment configuration: built-in defaults < TOML file < command-line flags."""

from copy import deepcopy

import numpy as np
import toml

from core import autodiff as ad
from core.problems import PROBLEMS, make_problem
from core.schemes import SCHEME_DEFAULTS, SCHEME_NAMES, Scheme
from core.sde import TimeGrid
from core.train import POLICY_KINDS, STEP_SCHEDULE_END, DecayPolicy, TrainConfig

DEFAULTS = {
    'problem': {
        'id': 'ex1',
        'overrides': {},
    },
    'scheme': {
        'kind': 'ladbsde',
        'backbone': 'mlp',
        'reduction': 'mean',
        'algorithm': 'backward',
    },
    'train': {
        'N': 30,
        'batch': 64,
        'steps': 60000,
        'policy': 'plateau',
        'seeds': [1],
        'shards': 1,
        'workers': 1,
        'init': 'uniform',
        'validation_size': 1024,
        'probe_every': 100,
        'period': 1000,
        'threshold': 0.05,
        'patience': 2,
        'warm_steps': 30000,
        'log_every': 100,
    },
    'evaluate': {
        'test_size': 4096,
        'test_seed': 2024,
        'ddof': 0,
    },
    'output': {
        'dir': 'runs',
        'workers': 1,
    },
    'sweep': {},
}


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f'{field}: {message}')
        self.field = field


def _merge(base, overrides):
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict) and key != 'overrides':
            _merge(base[key], value)
        else:
            base[key] = deepcopy(value)
    return base


class ExperimentConfig:
    """Sections of a TOML experiment file; unset optional keys fall back to per-scheme defaults.

    [problem]   id, overrides (constructor keyword arguments)
    [scheme]    kind, backbone, reduction, algorithm, L, n, activation
    [train]     d, T, N, batch, steps, policy, gamma0, gamma_min, seeds, shards,
                workers, init, validation_size, probe_every, period, threshold,
                patience, warm_steps, log_every
    [evaluate]  test_size, test_seed, ddof
    [output]    dir, workers
    [sweep]     scheme, N, d (lists)
    """

    SECTIONS = tuple(DEFAULTS)

    def __init__(self, values=None):
        self.values = _merge(deepcopy(DEFAULTS), values or {})

    @classmethod
    def from_toml(cls, path):
        try:
            data = toml.load(path)
        except (OSError, toml.TomlDecodeError) as e:
            raise ConfigError('config', f'cannot read {path}: {e}')
        if 'config' in data and 'version' in data:
            # a run manifest
            data = data['config']
        return cls(data)

    def merged(self, overrides):
        return ExperimentConfig(_merge(deepcopy(self.values), overrides))

    def to_dict(self):
        return deepcopy(self.values)

    def __getattr__(self, name):
        values = self.__dict__.get('values')
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def validate(self):
        for section in self.values:
            if section not in self.SECTIONS:
                raise ConfigError(section, 'unknown section')
        problem, scheme, train = self.values['problem'], self.values['scheme'], self.values['train']
        evaluate, output = self.values['evaluate'], self.values['output']

        _check(problem['id'] in PROBLEMS, 'problem.id', f'unknown problem {problem["id"]!r}')
        _check(isinstance(problem['overrides'], dict), 'problem.overrides', 'must be a table')
        _check(scheme['kind'] in SCHEME_NAMES.inverse, 'scheme.kind', f'unknown scheme {scheme["kind"]!r}')
        _check(scheme['backbone'] in ('mlp', 'rnn'), 'scheme.backbone', f'unknown backbone {scheme["backbone"]!r}')
        _check(scheme['reduction'] in ('mean', 'sum'), 'scheme.reduction', 'must be mean or sum')
        _check(scheme['algorithm'] in ('forward', 'backward'), 'scheme.algorithm', 'must be forward or backward')
        _check(scheme['kind'] != 'dbsde' or scheme['backbone'] == 'mlp', 'scheme.backbone',
               'DBSDE step networks are feedforward only')
        for key in ('L', 'n'):
            if key in scheme:
                _positive_int(scheme[key], f'scheme.{key}')
        if 'activation' in scheme:
            _check(scheme['activation'] in ('tanh', 'sin', 'relu'), 'scheme.activation',
                   f'unknown activation {scheme["activation"]!r}')

        if 'd' in train:
            _positive_int(train['d'], 'train.d')
        if 'T' in train:
            _check(_number(train['T']) and train['T'] > 0, 'train.T', 'must be positive')
        _positive_int(train['N'], 'train.N')
        _check(scheme['kind'] != 'dbsde' or train['N'] >= 2, 'train.N', 'DBSDE needs N >= 2')
        for key in ('batch', 'steps', 'shards', 'workers', 'validation_size', 'probe_every', 'period',
                    'patience', 'log_every'):
            _positive_int(train[key], f'train.{key}')
        _check(train['period'] % train['probe_every'] == 0, 'train.period', 'must be a multiple of probe_every')
        _check(isinstance(train['warm_steps'], int) and train['warm_steps'] >= 0, 'train.warm_steps',
               'must be a non-negative integer')
        _check(_number(train['threshold']) and 0 <= train['threshold'] < 1, 'train.threshold', 'must be in [0, 1)')
        _check(train['policy'] in POLICY_KINDS, 'train.policy', f'unknown policy {train["policy"]!r}')
        _check(train['policy'] != 'step_schedule' or train['steps'] <= STEP_SCHEDULE_END, 'train.steps',
               f'the step schedule ends at step {STEP_SCHEDULE_END}')
        _check(train['init'] in ('uniform', 'normal'), 'train.init', 'must be uniform or normal')
        gamma0, gamma_min = self.gammas()
        _check(_number(gamma0) and gamma0 > 0, 'train.gamma0', 'must be positive')
        _check(_number(gamma_min) and 0 < gamma_min <= gamma0, 'train.gamma_min', 'must be in (0, gamma0]')

        seeds = train['seeds']
        _check(isinstance(seeds, list) and seeds, 'train.seeds', 'must be a non-empty list')
        _check(all(isinstance(s, int) and s >= 0 for s in seeds), 'train.seeds', 'must be non-negative integers')
        _check(len(set(seeds)) == len(seeds), 'train.seeds', 'must be distinct')

        _positive_int(evaluate['test_size'], 'evaluate.test_size')
        _check(isinstance(evaluate['test_seed'], int) and evaluate['test_seed'] >= 0, 'evaluate.test_seed',
               'must be a non-negative integer')
        _check(evaluate['ddof'] in (0, 1), 'evaluate.ddof', 'must be 0 or 1')
        _check(isinstance(output['dir'], str) and output['dir'], 'output.dir', 'must be a path')
        _positive_int(output['workers'], 'output.workers')

        for key, values in self.values['sweep'].items():
            _check(key in ('scheme', 'N', 'd'), f'sweep.{key}', 'unknown sweep axis')
            _check(isinstance(values, list) and values, f'sweep.{key}', 'must be a non-empty list')

        for key, value in problem['overrides'].items():
            _check(_number(value) or (isinstance(value, list) and value and all(_number(v) for v in value)),
                   'problem.overrides', f'{key} must be a number or a list of numbers, got {value!r}')
        try:
            _evaluate_once(self.make_problem())
        except (TypeError, ValueError, ArithmeticError) as e:
            raise ConfigError('problem.overrides', str(e))
        return self

    def gammas(self):
        defaults = SCHEME_DEFAULTS[SCHEME_NAMES.inverse[self.values['scheme']['kind']]]
        train = self.values['train']
        return train.get('gamma0', defaults['gamma0']), train.get('gamma_min', defaults['gamma_min'])

    def make_problem(self):
        problem, train = self.values['problem'], self.values['train']
        overrides = dict(problem['overrides'])
        for key in ('d', 'T'):
            if key in train:
                overrides[key] = train[key]
        return make_problem(problem['id'], **overrides)

    def make_grid(self, problem):
        return TimeGrid(problem.T, self.values['train']['N'])

    def make_scheme(self, problem, grid):
        s = self.values['scheme']
        return Scheme(s['kind'], problem, grid, backbone=s['backbone'], L=s.get('L'), n=s.get('n'),
                      activation=s.get('activation'), reduction=s['reduction'], algorithm=s['algorithm'])

    def policy(self):
        train = self.values['train']
        gamma0, gamma_min = self.gammas()
        return DecayPolicy(train['policy'], gamma0, gamma_min, period=train['period'],
                           probe_every=train['probe_every'], validation_size=train['validation_size'],
                           threshold=train['threshold'], patience=train['patience'],
                           warm_steps=train['warm_steps'], max_steps=train['steps'])

    def train_config(self, seed):
        train = self.values['train']
        return TrainConfig(batch=train['batch'], seed=seed, policy=self.policy(), max_steps=train['steps'],
                           shards=train['shards'], workers=train['workers'], init=train['init'],
                           log_every=train['log_every'])


def _evaluate_once(problem):
    x = problem.x0[None, :]
    problem.mu(0.0, x)
    problem.diffuse(0.0, x, np.zeros_like(x))
    if problem.terminal is not None:
        problem.terminal(x)
    if problem.driver is not None:
        problem.driver(0.0, x, ad.constant(np.zeros(1)), ad.constant(np.zeros((1, problem.d))))


def _check(condition, field, message):
    if not condition:
        raise ConfigError(field, message)


def _number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _positive_int(value, field):
    _check(isinstance(value, int) and not isinstance(value, bool) and value >= 1, field,
           f'must be a positive integer, got {value!r}')
