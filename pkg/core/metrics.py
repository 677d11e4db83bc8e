"""Error measures over ensembles of independent runs.

Spreads use the population convention (ddof=0) unless a caller asks for the
sample one. A single NC run turns the whole ensemble cell into NC.
"""

import numpy as np
import pandas as pd

T0_COLUMNS = ('scheme', 'problem', 'd', 'N', 'eps_y0', 'sd_y0', 'eps_z0', 'sd_z0', 'status')
REGRESSION_COLUMNS = ('scheme', 'i', 't_i', 'eps_y', 'sd_y', 'eps_z', 'sd_z')
LOSS_COLUMNS = ('step', 'mean', 'sd')


class RunResult:
    def __init__(self, seed, reason, y0=None, z0=None, Y=None, Z=None, probe_steps=(), val_loss=()):
        self.seed = seed
        self.reason = reason
        self.y0 = y0
        self.z0 = None if z0 is None else np.asarray(z0, dtype=np.float64)
        self.Y = Y
        self.Z = Z
        self.probe_steps = np.asarray(probe_steps, dtype=np.int64)
        self.val_loss = np.asarray(val_loss, dtype=np.float64)

    @property
    def nc(self):
        return self.reason == 'NC'


class RunEnsemble:
    def __init__(self, scheme, problem, d, N, runs=()):
        self.scheme = scheme
        self.problem = problem
        self.d = d
        self.N = N
        self.runs = list(runs)

    def add(self, run: RunResult):
        self.runs.append(run)

    @property
    def seeds(self):
        return [run.seed for run in self.runs]

    @property
    def nc(self):
        return any(run.nc for run in self.runs)

    def __len__(self):
        return len(self.runs)


class ErrorReport:
    def __init__(self, ensemble, t0=None, regression=None, loss=None):
        self.ensemble = ensemble
        self.t0 = t0
        self.regression = regression
        self.loss = loss

    @property
    def status(self):
        return 'NC' if self.ensemble.nc else 'ok'

    def t0_frame(self):
        eps_y0, sd_y0, eps_z0, sd_z0 = self.t0 if self.t0 is not None else (np.nan,) * 4
        e = self.ensemble
        return pd.DataFrame([(e.scheme, e.problem, e.d, e.N, eps_y0, sd_y0, eps_z0, sd_z0, self.status)],
                            columns=T0_COLUMNS)

    def regression_frame(self):
        return regression_frame(self.ensemble.scheme, self.regression)

    def loss_frame(self):
        if self.loss is None:
            return pd.DataFrame(columns=LOSS_COLUMNS)
        steps, mean, sd = self.loss
        return pd.DataFrame({'step': steps, 'mean': mean, 'sd': sd}, columns=LOSS_COLUMNS)


def _spread(values, ddof):
    values = np.asarray(values, dtype=np.float64)
    if values.size - ddof <= 0:
        return np.nan
    return float(np.std(values, ddof=ddof))


def t0_errors(ensemble: RunEnsemble, y0_ref, z0_ref=None, ddof=0):
    """(eps_y0, sd_y0, eps_z0, sd_z0) of the learned initial values.

    The Z error of a run is averaged over components first. Without a Z
    reference the Z entries are NaN; an NC ensemble gives all NaN.
    """
    if ensemble.nc or not ensemble.runs:
        return (np.nan,) * 4

    y_errors = [abs(y0_ref - run.y0) for run in ensemble.runs]
    eps_y0, sd_y0 = float(np.mean(y_errors)), _spread(y_errors, ddof)
    if z0_ref is None:
        return eps_y0, sd_y0, np.nan, np.nan

    z0_ref = np.asarray(z0_ref, dtype=np.float64)
    z_errors = [float(np.mean(np.abs(z0_ref - run.z0))) for run in ensemble.runs]
    return eps_y0, sd_y0, float(np.mean(z_errors)), _spread(z_errors, ddof)


def analytic_trajectory(problem, paths):
    """Exact Y (M, N) and Z (M, N, d) at t_0 .. t_{N-1} along ``paths``."""
    grid = paths.grid
    pairs = [problem.analytic(grid.times[i], paths.X[:, i, :]) for i in range(grid.N)]
    return np.stack([y for y, _ in pairs], axis=1), np.stack([z for _, z in pairs], axis=1)


def regression_errors(ensemble: RunEnsemble, test_paths, problem, ddof=0):
    """Per-step mean absolute errors of the learned trajectories on the shared test batch.

    Returns a dict of (N,) arrays eps_y, sd_y, eps_z, sd_z and t_i; every
    run must carry Y and Z evaluated on ``test_paths``.
    """
    N = test_paths.grid.N
    if ensemble.nc or not ensemble.runs:
        nan = np.full(N, np.nan)
        return dict(t_i=test_paths.grid.times[:N], eps_y=nan, sd_y=nan, eps_z=nan, sd_z=nan)

    Y_true, Z_true = analytic_trajectory(problem, test_paths)
    y_runs = np.stack([np.mean(np.abs(Y_true - run.Y), axis=0) for run in ensemble.runs])
    z_runs = np.stack([np.mean(np.abs(Z_true - run.Z), axis=(0, 2)) for run in ensemble.runs])

    def spread(rows):
        if rows.shape[0] - ddof <= 0:
            return np.full(N, np.nan)
        return np.std(rows, axis=0, ddof=ddof)

    return dict(t_i=test_paths.grid.times[:N],
                eps_y=y_runs.mean(axis=0), sd_y=spread(y_runs),
                eps_z=z_runs.mean(axis=0), sd_z=spread(z_runs))


def regression_frame(scheme, regression):
    if regression is None:
        return pd.DataFrame(columns=REGRESSION_COLUMNS)
    N = len(regression['eps_y'])
    return pd.DataFrame({
        'scheme': [scheme] * N,
        'i': np.arange(N),
        't_i': regression['t_i'],
        'eps_y': regression['eps_y'],
        'sd_y': regression['sd_y'],
        'eps_z': regression['eps_z'],
        'sd_z': regression['sd_z'],
    }, columns=REGRESSION_COLUMNS)


def mean_loss(traces, ddof=0):
    traces = list(traces)
    if not traces:
        raise ValueError('no loss traces')
    steps = np.asarray(traces[0][0])
    for other, _ in traces[1:]:
        other = np.asarray(other)
        if other.shape != steps.shape or not np.array_equal(other, steps):
            raise ValueError(f'loss traces are not aligned: {steps.size} vs {other.size} validation steps')
    values = np.stack([np.asarray(v, dtype=np.float64) for _, v in traces])
    sd = np.std(values, axis=0, ddof=ddof) if values.shape[0] > ddof else np.full(steps.size, np.nan)
    return steps, values.mean(axis=0), sd


def ensemble_loss(ensemble: RunEnsemble, ddof=0):
    """mean_loss over the runs whose traces share the longest common prefix."""
    runs = [run for run in ensemble.runs if run.probe_steps.size]
    if not runs:
        return None
    length = min(run.probe_steps.size for run in runs)
    return mean_loss([(run.probe_steps[:length], run.val_loss[:length]) for run in runs], ddof)


def error_report(ensemble: RunEnsemble, problem, y0_ref=None, z0_ref=None, test_paths=None, ddof=0):
    t0 = None if y0_ref is None else t0_errors(ensemble, y0_ref, z0_ref, ddof)
    regression = None
    if test_paths is not None and problem.has_analytic:
        regression = regression_errors(ensemble, test_paths, problem, ddof)
    return ErrorReport(ensemble, t0, regression, ensemble_loss(ensemble, ddof))
