import numpy as np
from absl import logging

from .rng import standard_normals


class SimulationError(RuntimeError):
    def __init__(self, message, samples=(), step=None):
        super().__init__(message)
        self.samples = tuple(int(s) for s in samples)
        self.step = step


class TimeGrid:
    def __init__(self, T, N):
        if T <= 0:
            raise ValueError(f'time horizon must be positive, got {T}')
        if N < 1:
            raise ValueError(f'step count must be >= 1, got {N}')
        self.T = float(T)
        self.N = int(N)
        self.dt = self.T / self.N
        times = np.arange(self.N + 1) * self.dt
        times[-1] = self.T
        self.times = times

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and (self.T, self.N) == (other.T, other.N)

    def __repr__(self):
        return f'TimeGrid(T={self.T}, N={self.N})'


class BrownianBatch:
    def __init__(self, increments, grid: TimeGrid, seed, stream=0, first_sample=0):
        self.increments = increments
        self.grid = grid
        self.seed = seed
        self.stream = stream
        self.first_sample = first_sample

    @property
    def M(self):
        return self.increments.shape[0]

    @property
    def d(self):
        return self.increments.shape[2]

    def stream_ids(self):
        return np.arange(self.first_sample, self.first_sample + self.M)

    def terminal(self):
        return self.increments.sum(axis=1)


class PathBatch:
    def __init__(self, X, grid: TimeGrid, brownian: BrownianBatch):
        self.X = X
        self.grid = grid
        self.brownian = brownian

    @property
    def M(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[2]

    @property
    def dW(self):
        return self.brownian.increments

    def shard(self, start, stop):
        b = self.brownian
        sub = BrownianBatch(b.increments[start:stop], b.grid, b.seed, b.stream, b.first_sample + start)
        return PathBatch(self.X[start:stop], self.grid, sub)


def sample_increments(seed, M, grid: TimeGrid, d, stream=0, first_sample=0):
    if M < 1:
        raise ValueError(f'sample count must be >= 1, got {M}')
    z = standard_normals(seed, stream, M, grid.N, d, first_sample)
    return BrownianBatch(np.sqrt(grid.dt) * z, grid, seed, stream, first_sample)


def coarsen(brownian: BrownianBatch, factor):
    grid = brownian.grid
    if grid.N % factor != 0:
        raise ValueError(f'{factor} does not divide N={grid.N}')
    M, N, d = brownian.increments.shape
    summed = brownian.increments.reshape(M, N // factor, factor, d).sum(axis=2)
    return BrownianBatch(summed, TimeGrid(grid.T, N // factor),
                         brownian.seed, brownian.stream, brownian.first_sample)


def euler_forward(problem, grid: TimeGrid, brownian: BrownianBatch):
    if brownian.d != problem.d:
        raise ValueError(f'problem dimension {problem.d} does not match increments {brownian.d}')
    if brownian.grid.N != grid.N:
        raise ValueError(f'increments cover {brownian.grid.N} steps, grid has {grid.N}')

    M = brownian.M
    X = np.empty((M, grid.N + 1, problem.d))
    X[:, 0, :] = problem.x0
    dt = grid.dt

    for i in range(grid.N):
        t = grid.times[i]
        x = X[:, i, :]
        X[:, i + 1, :] = x + problem.mu(t, x) * dt + problem.diffuse(t, x, brownian.increments[:, i, :])

        bad = ~np.isfinite(X[:, i + 1, :]).all(axis=1)
        if bad.any():
            samples = np.flatnonzero(bad) + brownian.first_sample
            logging.warning('non-finite state at step %d for %d samples (first: %d)',
                            i + 1, samples.size, samples[0])
            raise SimulationError(f'non-finite forward state at step {i + 1}', samples, i + 1)

    return PathBatch(X, grid, brownian)


def simulate(problem, grid: TimeGrid, M, seed, stream=0):
    return euler_forward(problem, grid, sample_increments(seed, M, grid, problem.d, stream))


def strong_error(problem, ladder, M, seed, stream=0):
    """Monte-Carlo E|X_T - exact| on each grid of ``ladder``, one coupled set of paths.

    The finest grid's increments are drawn once and summed down to the
    coarser grids, so every grid sees the same Brownian paths.
    """
    ladder = sorted(int(n) for n in ladder)
    finest = TimeGrid(problem.T, ladder[-1])
    fine = sample_increments(seed, M, finest, problem.d, stream)
    exact = problem.exact_terminal(fine)

    results = list()
    for N in ladder:
        coarse = coarsen(fine, finest.N // N)
        paths = euler_forward(problem, coarse.grid, coarse)
        error = float(np.mean(np.abs(paths.X[:, -1, :] - exact).sum(axis=1)))
        results.append((coarse.grid.dt, error))
        logging.debug('strong error N=%d dt=%.3e: %.4e', N, coarse.grid.dt, error)
    return results


def convergence_slope(results):
    dts, errors = zip(*results)
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
