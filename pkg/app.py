"""Command-line driver: train, evaluate, sweep, simulate and check.

    python main.py train --config ex3.toml --seed 1 --seed 2 --out runs/ex3
    python main.py evaluate --config runs/ex3/manifest.toml
    python main.py sweep --config base.toml --sweep_scheme ladbsde,dbsde --sweep_N 20,40
    python main.py simulate --problem ex1 --steps 40 --checkpoint runs/ex1/checkpoints/seed1.ckpt
    python main.py check
"""

import itertools
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pandas as pd
import toml
from absl import app, flags, logging

from version import format_version

import serial
from config import ConfigError, ExperimentConfig
from core import metrics
from core.checks import run_checks
from core.problems import NoAnalyticSolution, analytic_solution
from core.schemes import evaluate_solution
from core.sde import SimulationError, euler_forward, sample_increments
from core.train import TEST_STREAM, train

EXIT_OK, EXIT_CONFIG, EXIT_NC, EXIT_FAILURE = 0, 2, 3, 4
COMMANDS = ('train', 'evaluate', 'sweep', 'simulate', 'check')

flags.DEFINE_string('config', None, 'Experiment TOML file or run manifest.')
flags.DEFINE_string('out', None, 'Output directory.')
flags.DEFINE_multi_integer('seed', None, 'Training seed; repeat for an ensemble.')
flags.DEFINE_enum('scheme', None, ['dbsde', 'ldbsde', 'ladbsde'], 'Scheme to train.')
flags.DEFINE_enum('problem', None, ['ex1', 'ex2', 'ex3', 'ex4'], 'Benchmark problem.')
flags.DEFINE_integer('dim', None, 'Problem dimension d.')
flags.DEFINE_integer('steps', None, 'Number of time steps N.')
flags.DEFINE_integer('iters', None, 'Maximum number of Adam steps.')
flags.DEFINE_integer('batch', None, 'Mini-batch size M.')
flags.DEFINE_integer('workers', None, 'Worker count for sweep cells and gradient shards.')
flags.DEFINE_integer('shards', None, 'Gradient shards per mini-batch.')
flags.DEFINE_enum('policy', None, ['plateau', 'step_schedule', 'constant', 'warm_then_plateau'],
                  'Learning-rate policy.')
flags.DEFINE_list('sweep_scheme', None, 'Schemes to sweep over.')
flags.DEFINE_list('sweep_N', None, 'Step counts to sweep over.')
flags.DEFINE_list('sweep_d', None, 'Dimensions to sweep over.')
flags.DEFINE_string('checkpoint', None, 'Checkpoint whose learned solution `simulate` writes.')
flags.DEFINE_integer('show', 5, 'Paths written to solution.csv by `simulate`.')

FLAGS = flags.FLAGS


def flag_overrides(f=FLAGS):
    overrides = dict()

    def put(section, key, value):
        if value is not None:
            overrides.setdefault(section, dict())[key] = value

    put('problem', 'id', f.problem)
    put('scheme', 'kind', f.scheme)
    put('train', 'd', f.dim)
    put('train', 'N', f.steps)
    put('train', 'steps', f.iters)
    put('train', 'batch', f.batch)
    put('train', 'seeds', f.seed)
    put('train', 'shards', f.shards)
    put('train', 'policy', f.policy)
    put('train', 'workers', f.workers)
    put('output', 'workers', f.workers)
    put('output', 'dir', f.out)
    put('sweep', 'scheme', f.sweep_scheme)
    put('sweep', 'N', None if f.sweep_N is None else [int(v) for v in f.sweep_N])
    put('sweep', 'd', None if f.sweep_d is None else [int(v) for v in f.sweep_d])
    return overrides


def load_config(path=None, overrides=None):
    config = ExperimentConfig.from_toml(path) if path else ExperimentConfig()
    return config.merged(overrides or {}).validate()


RECORD_COLUMNS = ['step', 'train_loss', 'val_loss', 'lr']


def _paths(out_dir, seed):
    return (os.path.join(out_dir, 'checkpoints', f'seed{seed}.ckpt'),
            os.path.join(out_dir, 'records', f'seed{seed}.csv'))


def _build(config):
    problem = config.make_problem()
    grid = config.make_grid(problem)
    return problem, grid, config.make_scheme(problem, grid)


def train_seed(config, seed):
    problem, grid, scheme = _build(config)
    out_dir = config.output['dir']
    checkpoint_path, record_path = _paths(out_dir, seed)
    meta = dict(seed=seed, scheme=scheme.name, problem=problem.name)

    def write_record(record):
        serial.write_csv(record_path, pd.DataFrame(record.rows(), columns=RECORD_COLUMNS))

    def on_checkpoint(k, params, adam, bn_states, record):
        serial.save_checkpoint(checkpoint_path, serial.Checkpoint(
            params, k, adam, bn_states, scheme.descriptor, dict(meta, reason='running')))
        write_record(record)

    try:
        params, record = train(problem, scheme, grid, config.train_config(seed), on_checkpoint)
    except SimulationError as e:
        logging.warning('seed %d: forward simulation failed (%s), recorded as NC', seed, e)
        return dict(seed=seed, reason='NC', steps=0, wall_clock=0.0, checkpoint='', record='')

    serial.save_checkpoint(checkpoint_path, serial.Checkpoint(
        params, record.step_count, record.adam, record.bn_states, scheme.descriptor,
        dict(meta, reason=record.reason)))
    write_record(record)
    logging.info('seed %d: %s after %d steps, rho=%d (published formula %d)', seed, record.reason,
                 record.step_count, scheme.true_param_count(), scheme.published_param_count())
    return dict(seed=seed, reason=record.reason, steps=record.step_count, wall_clock=record.wall_clock,
                checkpoint=os.path.relpath(checkpoint_path, out_dir),
                record=os.path.relpath(record_path, out_dir))


def _inventory(out_dir):
    files = list()
    for root, _, names in os.walk(out_dir):
        for name in names:
            if not name.startswith('.'):
                files.append(os.path.relpath(os.path.join(root, name), out_dir))
    return files


def cmd_train(config):
    out_dir = config.output['dir']
    runs = [train_seed(config, seed) for seed in config.train['seeds']]
    manifest_path = os.path.join(out_dir, 'manifest.toml')
    serial.save_manifest(manifest_path, config.to_dict(), runs, _inventory(out_dir) + ['manifest.toml'])
    return runs


def references(problem):
    """(Y_0, Z_0) to measure t_0 errors against; Z_0 is None without an analytic solution."""
    try:
        y0, z0 = analytic_solution(problem, 0.0, problem.x0)
        return y0, z0
    except NoAnalyticSolution:
        return problem.reference_y0, None


def make_test_paths(config, problem, grid):
    evaluate = config.evaluate
    brownian = sample_increments(evaluate['test_seed'], evaluate['test_size'], grid, problem.d, TEST_STREAM)
    return euler_forward(problem, grid, brownian)


def cmd_evaluate(config, runs=None):
    problem, grid, scheme = _build(config)
    out_dir = config.output['dir']
    ensemble = metrics.RunEnsemble(scheme.name, problem.name, problem.d, grid.N)
    test_paths, paths_failed = None, False
    if problem.has_analytic:
        try:
            test_paths = make_test_paths(config, problem, grid)
        except SimulationError as e:
            logging.warning('test paths could not be simulated (%s), every run recorded as NC', e)
            paths_failed = True
    reasons = {run['seed']: run['reason'] for run in runs or ()}

    for seed in config.train['seeds']:
        checkpoint_path, record_path = _paths(out_dir, seed)
        if reasons.get(seed) == 'NC' and not os.path.exists(checkpoint_path):
            ensemble.add(metrics.RunResult(seed, 'NC'))
            continue
        checkpoint = serial.load_checkpoint(checkpoint_path, scheme.descriptor)
        reason = 'NC' if paths_failed else checkpoint.meta.get('reason', reasons.get(seed))
        record = pd.read_csv(record_path)
        probes = record[record['val_loss'].notna()]
        if reason == 'NC':
            ensemble.add(metrics.RunResult(seed, reason, probe_steps=probes['step'], val_loss=probes['val_loss']))
            continue

        params, bn_states = checkpoint.params, checkpoint.bn_states
        y0, z0 = scheme.initial_values(params, bn_states)
        Y = Z = None
        if test_paths is not None:
            Y, Z = evaluate_solution(scheme, params, test_paths, bn_states)
        ensemble.add(metrics.RunResult(seed, reason, y0, z0, Y, Z, probes['step'], probes['val_loss']))

    y0_ref, z0_ref = references(problem)
    report = metrics.error_report(ensemble, problem, y0_ref, z0_ref, test_paths, config.evaluate['ddof'])
    serial.write_csv(os.path.join(out_dir, 't0_errors.csv'), report.t0_frame())
    serial.write_csv(os.path.join(out_dir, 'regression.csv'), report.regression_frame())
    serial.write_csv(os.path.join(out_dir, 'loss.csv'), report.loss_frame())
    logging.info('%s on %s: eps_y0 %s, eps_z0 %s (%s)', scheme.name, problem.name,
                 report.t0_frame().loc[0, 'eps_y0'], report.t0_frame().loc[0, 'eps_z0'], report.status)
    return report


def sweep_cells(config):
    sweep = config.sweep
    schemes = sweep.get('scheme', [config.scheme['kind']])
    steps = sweep.get('N', [config.train['N']])
    dims = sweep.get('d', [config.train.get('d')])
    cells = list()
    for scheme, N, d in itertools.product(schemes, steps, dims):
        name = f'{scheme}_N{N}' + ('' if d is None else f'_d{d}')
        train = dict(N=N) if d is None else dict(N=N, d=d)
        overrides = dict(scheme=dict(kind=scheme), train=dict(train, workers=1),
                         output=dict(dir=os.path.join(config.output['dir'], name)))
        cells.append(config.merged(overrides).validate().to_dict())
    return cells


def run_cell(values):
    config = ExperimentConfig(values)
    runs = cmd_train(config)
    return cmd_evaluate(config, runs).t0_frame()


def cmd_sweep(config):
    cells = sweep_cells(config)
    workers = min(config.output['workers'], len(cells))
    logging.info('sweep over %d cells with %d workers', len(cells), workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(cell) for cell in cells]
    table = pd.concat(rows, ignore_index=True)
    serial.write_csv(os.path.join(config.output['dir'], 'sweep.csv'), table)
    return table


def solution_frame(problem, scheme, paths, checkpoint, show):
    """Learned and exact (Y, Z_1) along the first ``show`` paths."""
    Y, Z = evaluate_solution(scheme, checkpoint.params, paths, checkpoint.bn_states)
    grid = paths.grid
    rows = list()
    for m in range(min(show, paths.M)):
        for i in range(grid.N):
            y_exact = z_exact = np.nan
            if problem.has_analytic:
                y, z = analytic_solution(problem, grid.times[i], paths.X[m, i, :])
                y_exact, z_exact = y, z[0]
            rows.append((m, i, grid.times[i], Y[m, i], y_exact, Z[m, i, 0], z_exact))
    return pd.DataFrame(rows, columns=['sample', 'i', 't_i', 'y', 'y_exact', 'z1', 'z1_exact'])


def cmd_simulate(config, checkpoint_path=None, show=5):
    problem, grid, scheme = _build(config)
    out_dir = config.output['dir']
    paths = make_test_paths(config, problem, grid)
    serial.save_paths(os.path.join(out_dir, 'paths.bin'), paths, config.problem['id'])
    if checkpoint_path:
        checkpoint = serial.load_checkpoint(checkpoint_path, scheme.descriptor)
        serial.write_csv(os.path.join(out_dir, 'solution.csv'),
                         solution_frame(problem, scheme, paths, checkpoint, show))
    return paths


def manifest_runs(path):
    if not path:
        return None
    data = toml.load(path)
    if 'config' not in data or 'version' not in data:
        return None
    return serial.load_manifest(path)['runs']


def dispatch(command, config_path=None, overrides=None, checkpoint=None, show=5):
    if command not in COMMANDS:
        logging.error('unknown command %r, expected one of %s', command, ', '.join(COMMANDS))
        return EXIT_CONFIG
    if command == 'check':
        return EXIT_FAILURE if run_checks() else EXIT_OK

    try:
        config = load_config(config_path, overrides)
        if command == 'train':
            runs = cmd_train(config)
            return EXIT_NC if any(run['reason'] == 'NC' for run in runs) else EXIT_OK
        if command == 'evaluate':
            report = cmd_evaluate(config, manifest_runs(config_path))
            return EXIT_NC if report.status == 'NC' else EXIT_OK
        if command == 'sweep':
            table = cmd_sweep(config)
            return EXIT_NC if (table['status'] == 'NC').any() else EXIT_OK
        cmd_simulate(config, checkpoint, show)
        return EXIT_OK
    except (ConfigError, serial.CheckpointError) as e:
        logging.error('%s', e)
        return EXIT_CONFIG
    except (SimulationError, OSError, ArithmeticError) as e:
        logging.error('%s failed: %s', command, e)
        return EXIT_FAILURE
    except Exception as e:
        logging.exception('%s failed unexpectedly: %s', command, e)
        return EXIT_FAILURE


def main(argv):
    if len(argv) < 2:
        logging.error('usage: main.py {%s} [flags]', '|'.join(COMMANDS))
        return EXIT_CONFIG
    logging.info('%s: %s', format_version(), argv[1])
    return dispatch(argv[1], FLAGS.config, flag_overrides(), FLAGS.checkpoint, FLAGS.show)


def run_app():
    app.run(main)
