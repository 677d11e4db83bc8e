import pytest
import toml

import serial
from config import DEFAULTS, ConfigError, ExperimentConfig


def test_defaults_are_valid():
    config = ExperimentConfig().validate()
    assert config.train['N'] == DEFAULTS['train']['N']
    assert config.gammas() == (1e-3, 1e-5)
    problem = config.make_problem()
    assert problem.name == 'ex1' and problem.d == 1


def test_file_values_override_defaults_and_flags_override_files(tmp_path):
    path = tmp_path / 'exp.toml'
    path.write_text(toml.dumps({'scheme': {'kind': 'dbsde'}, 'train': {'N': 20, 'batch': 32}}))
    config = ExperimentConfig.from_toml(path)
    assert (config.scheme['kind'], config.train['N'], config.train['batch']) == ('dbsde', 20, 32)
    assert config.train['steps'] == DEFAULTS['train']['steps']
    assert config.gammas() == (1e-2, 1e-4)

    merged = config.merged({'train': {'N': 8}}).validate()
    assert (merged.train['N'], merged.train['batch']) == (8, 32)
    assert config.train['N'] == 20


def test_problem_overrides_are_replaced_not_merged():
    config = ExperimentConfig({'problem': {'id': 'ex3', 'overrides': {'d': 4, 'r': 0.1}}})
    merged = config.merged({'problem': {'overrides': {'d': 2}}})
    assert merged.problem['overrides'] == {'d': 2}


def test_train_dimension_and_horizon_reach_the_problem():
    config = ExperimentConfig({'problem': {'id': 'ex3'}, 'train': {'d': 10, 'T': 0.5, 'N': 5}}).validate()
    problem = config.make_problem()
    assert (problem.d, problem.T) == (10, 0.5)
    grid = config.make_grid(problem)
    assert (grid.T, grid.N) == (0.5, 5)
    scheme = config.make_scheme(problem, grid)
    assert scheme.n == 20


@pytest.mark.parametrize('values, field', [
    ({'train': {'N': -3}}, 'train.N'),
    ({'train': {'batch': 0}}, 'train.batch'),
    ({'train': {'seeds': [1, 1]}}, 'train.seeds'),
    ({'train': {'seeds': []}}, 'train.seeds'),
    ({'train': {'policy': 'cosine'}}, 'train.policy'),
    ({'train': {'gamma0': 1e-6, 'gamma_min': 1e-3}}, 'train.gamma_min'),
    ({'train': {'period': 1000, 'probe_every': 300}}, 'train.period'),
    ({'train': {'T': -1.0}}, 'train.T'),
    ({'problem': {'id': 'ex7'}}, 'problem.id'),
    ({'problem': {'overrides': {'bogus': 1}}}, 'problem.overrides'),
    ({'problem': {'id': 'ex2', 'overrides': {'alpha': 'x'}}}, 'problem.overrides'),
    ({'problem': {'id': 'ex3', 'overrides': {'s0': []}}}, 'problem.overrides'),
    ({'train': {'policy': 'step_schedule', 'steps': 100001}}, 'train.steps'),
    ({'scheme': {'kind': 'pinn'}}, 'scheme.kind'),
    ({'scheme': {'kind': 'dbsde', 'backbone': 'rnn'}}, 'scheme.backbone'),
    ({'scheme': {'kind': 'dbsde'}, 'train': {'N': 1}}, 'train.N'),
    ({'scheme': {'activation': 'gelu'}}, 'scheme.activation'),
    ({'evaluate': {'ddof': 2}}, 'evaluate.ddof'),
    ({'sweep': {'K': [1]}}, 'sweep.K'),
    ({'sweep': {'N': []}}, 'sweep.N'),
    ({'extra': {}}, 'extra'),
])
def test_validation_names_the_field(values, field):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig(values).validate()
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_unreadable_file(tmp_path):
    path = tmp_path / 'broken.toml'
    path.write_text('train = [unclosed\n')
    with pytest.raises(ConfigError):
        ExperimentConfig.from_toml(path)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_toml(tmp_path / 'missing.toml')


def test_manifest_is_a_config(tmp_path):
    config = ExperimentConfig({'problem': {'id': 'ex3'}, 'train': {'d': 2, 'N': 6, 'seeds': [3, 4]}}).validate()
    serial.save_manifest(tmp_path / 'manifest.toml', config.to_dict(), [], [])
    loaded = ExperimentConfig.from_toml(tmp_path / 'manifest.toml').validate()
    assert loaded.to_dict() == config.to_dict()


def test_policy_and_train_config():
    config = ExperimentConfig({'scheme': {'kind': 'ldbsde'},
                               'train': {'policy': 'step_schedule', 'steps': 300, 'batch': 16}}).validate()
    policy = config.policy()
    assert (policy.kind, policy.gamma0, policy.gamma_min, policy.max_steps) == ('step_schedule', 1e-3, 1e-5, 300)
    train = config.train_config(7)
    assert (train.seed, train.batch, train.max_steps) == (7, 16, 300)
