"""Loss formulations of the DBSDE, LDBSDE and LaDBSDE schemes.

All three share the Euler step of the backward equation

    Y_{i+1} = Y_i - f(t_i, X_i, Y_i, Z_i) dt + Z_i dW_i

and differ in what is learned and where the mismatch is measured:

  DBSDE    free (Y_0, Z_0), one network per step for Z_i, terminal loss only
  LDBSDE   one network psi(t, x) for Y, Z = d psi/dx sigma, one residual per
           interval plus the terminal mismatch
  LaDBSDE  same network, each Y_i is compared with the terminal value plus
           the driver and martingale terms accumulated from i to N

Per-sample terms are reduced with the batch mean (or sum, see
``reduction``), sample-major and then in time order.
"""

from enum import Enum

import numpy as np
from absl import logging
from bidict import bidict

from . import autodiff as ad
from .descriptors import Composite, Free, MLPConfig, RNNConfig
from .nets import MLP, RNN, BatchNormState, Network, init_batch_norm, init_params, mlp_forward, param_count

DIVERGENCE_BOUND = 1e10


class SchemeKind(Enum):
    DBSDE, LDBSDE, LaDBSDE = range(3)


SCHEME_NAMES = bidict({
    SchemeKind.DBSDE: 'dbsde',
    SchemeKind.LDBSDE: 'ldbsde',
    SchemeKind.LaDBSDE: 'ladbsde',
})

# hidden layers, activation, gamma_0, gamma_min; hidden width is always 10 + d
SCHEME_DEFAULTS = {
    SchemeKind.DBSDE: dict(L=2, activation='relu', gamma0=1e-2, gamma_min=1e-4),
    SchemeKind.LDBSDE: dict(L=4, activation='sin', gamma0=1e-3, gamma_min=1e-5),
    SchemeKind.LaDBSDE: dict(L=4, activation='tanh', gamma0=1e-3, gamma_min=1e-5),
}


class LossBreakdown:
    def __init__(self, total, local=(), terminal=None, diverged=False):
        self.total = total
        self.local = list(local)
        self.terminal = terminal
        self.diverged = diverged or not np.isfinite(total.data).all()

    @property
    def value(self):
        return total_value(self.total)

    def local_values(self):
        return np.array([t.item() for t in self.local])


def total_value(t):
    return float(np.asarray(t.data).reshape(-1)[0])


class SchemeOutput:
    """Learned Y_i (M,) and Z_i (M, d) for i = 0..N-1, plus Y_N where the scheme has one."""

    def __init__(self, Y, Z, Y_terminal=None, diverged=False):
        self.Y = Y
        self.Z = Z
        self.Y_terminal = Y_terminal
        self.diverged = diverged

    def arrays(self):
        Y = np.stack([t.data for t in self.Y], axis=1)
        Z = np.stack([t.data for t in self.Z], axis=1)
        terminal = None if self.Y_terminal is None else self.Y_terminal.data.copy()
        return Y, Z, terminal


def _reduce(x, reduction):
    if reduction == 'mean':
        return ad.mean(x)
    if reduction == 'sum':
        return ad.reduce_sum(x)
    raise ValueError(f'unknown reduction {reduction!r}')


def _accumulate(terms):
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def _tape_of(params):
    theta = getattr(params, 'theta', None)
    tape = getattr(theta, 'tape', None)
    return ad.Tape() if tape is None else tape


def _sigma_operand(problem, t, x):
    if problem.sigma_diag is not None:
        return problem.sigma_diag(t, x)
    return problem.sigma(t, x)


def z_from_network(net: Network, params, t, x, sigma, create_graph=True):
    """Network output Y = psi(t, x) and Z = d psi/dx sigma for every row of ``x``.

    ``sigma`` is an (M, d) diagonal or an (M, d, d) matrix per row. The input
    gradient is recorded when ``create_graph`` is set, so parameter gradients
    of anything built on Z flow through it.
    """
    x = np.asarray(x, dtype=np.float64)
    M, d = x.shape
    times = np.broadcast_to(np.asarray(t, dtype=np.float64), (M,))
    tape = _tape_of(params)
    inputs = tape.leaf(np.column_stack([times, x]))
    y = ad.reshape(net.evaluate(params, [inputs])[0], (M,))
    grad = ad.grad_wrt_input(ad.reduce_sum(y), inputs, create_graph=create_graph)
    gx = ad.take(grad, 1, 1, d + 1)
    sigma = np.asarray(sigma, dtype=np.float64)
    z = ad.mul(gx, sigma) if sigma.ndim == 2 else ad.vecmat(gx, sigma)
    return y, z


class AnalyticStub(Network):
    markovian = True

    def __init__(self, problem, offset_y=0.0):
        super().__init__(None)
        self.problem = problem
        self.offset_y = offset_y

    def solution(self, grid, paths, count):
        Ys, Zs = list(), list()
        for i in range(count):
            y, z = self.problem.analytic(grid.times[i], paths.X[:, i, :])
            Ys.append(ad.constant(y + self.offset_y))
            Zs.append(ad.constant(z))
        return Ys, Zs


def network_solution(problem, grid, paths, net, params, count, create_graph=True):
    if isinstance(net, AnalyticStub):
        return net.solution(grid, paths, count)

    M, d = paths.M, paths.d
    if net.markovian:
        # all requested times in one batch, rows ordered time-major
        times = np.repeat(grid.times[:count], M)
        states = paths.X[:, :count, :].transpose(1, 0, 2).reshape(count * M, d)
        sigma = _sigma_operand(problem, times, states)
        y, z = z_from_network(net, params, times, states, sigma, create_graph)
        Ys = [ad.take(y, 0, i * M, (i + 1) * M) for i in range(count)]
        Zs = [ad.take(z, 0, i * M, (i + 1) * M) for i in range(count)]
        return Ys, Zs

    tape = _tape_of(params)
    leaves = [tape.leaf(np.column_stack([np.full(M, grid.times[i]), paths.X[:, i, :]]))
              for i in range(count)]
    outputs = net.evaluate(params, leaves)
    Ys, Zs = list(), list()
    for i, (leaf, out) in enumerate(zip(leaves, outputs)):
        y = ad.reshape(out, (M,))
        grad = ad.grad_wrt_input(ad.reduce_sum(y), leaf, create_graph=create_graph)
        gx = ad.take(grad, 1, 1, d + 1)
        Ys.append(y)
        Zs.append(problem.z_from_gradient(grid.times[i], paths.X[:, i, :], gx))
    return Ys, Zs


def _increment(problem, grid, paths, i, y, z):
    f = problem.driver(grid.times[i], paths.X[:, i, :], y, z)
    martingale = ad.reduce_sum(ad.mul(z, paths.dW[:, i, :]), axis=1)
    return ad.scale(f, grid.dt) - martingale


def dbsde_rollout(problem, grid, paths, params, step_config: MLPConfig, bn_states=None, stats=None):
    M = paths.M
    y = ad.reshape(ad.repeat(params['y0/value'], 0, M), (M,))
    z = ad.repeat(params['z0/value'], 0, M)

    Ys, Zs = list(), list()
    diverged = False
    for i in range(grid.N):
        if i >= 1:
            z = mlp_forward(step_config, params, paths.X[:, i, :], prefix=f'step{i}/',
                            bn_states=bn_states, stats=stats)
        Ys.append(y)
        Zs.append(z)
        y = y - _increment(problem, grid, paths, i, y, z)
        if not diverged and not (np.abs(y.data) <= DIVERGENCE_BOUND).all():
            diverged = True
            logging.warning('DBSDE rollout left the finite range at step %d', i + 1)

    return SchemeOutput(Ys, Zs, Y_terminal=y, diverged=diverged)


def dbsde_loss(output: SchemeOutput, paths, problem, reduction='mean'):
    mismatch = output.Y_terminal - problem.terminal(paths.X[:, -1, :])
    terminal = _reduce(ad.square(mismatch), reduction)
    return LossBreakdown(terminal, (), terminal, diverged=output.diverged)


def _ldbsde_terms(problem, grid, paths, Ys, Zs, reduction):
    local = list()
    for i in range(grid.N):
        # Y_i - f dt + Z dW - Y_{i+1}
        residual = Ys[i] - _increment(problem, grid, paths, i, Ys[i], Zs[i]) - Ys[i + 1]
        local.append(_reduce(ad.square(residual), reduction))
    mismatch = Ys[grid.N] - problem.terminal(paths.X[:, -1, :])
    terminal = _reduce(ad.square(mismatch), reduction)
    return LossBreakdown(_accumulate(local + [terminal]), local, terminal)


def ldbsde_loss(problem, grid, paths, net, params, reduction='mean', create_graph=True):
    Ys, Zs = network_solution(problem, grid, paths, net, params, grid.N + 1, create_graph)
    return _ldbsde_terms(problem, grid, paths, Ys, Zs, reduction)


def _ladbsde_increments(problem, grid, paths, Ys, Zs):
    return [_increment(problem, grid, paths, i, Ys[i], Zs[i]) for i in range(grid.N)]


def _ladbsde_locals(Ys, targets, reduction):
    local = [_reduce(ad.square(Ys[i] - targets[i]), reduction) for i in range(len(targets))]
    return LossBreakdown(_accumulate(local), local, None)


def ladbsde_loss_backward(problem, grid, paths, net, params, reduction='mean', create_graph=True):
    """One backward sweep: target_N = g(X_N), target_i = target_{i+1} + f_i dt - Z_i dW_i."""
    Ys, Zs = network_solution(problem, grid, paths, net, params, grid.N, create_graph)
    increments = _ladbsde_increments(problem, grid, paths, Ys, Zs)

    targets = [None] * grid.N
    target = ad.constant(problem.terminal(paths.X[:, -1, :]))
    for i in reversed(range(grid.N)):
        target = target + increments[i]
        targets[i] = target
    return _ladbsde_locals(Ys, targets, reduction)


def ladbsde_loss_forward(problem, grid, paths, net, params, reduction='mean', create_graph=True):
    """Each target summed from scratch, O(N^2); kept as an oracle for the backward sweep."""
    Ys, Zs = network_solution(problem, grid, paths, net, params, grid.N, create_graph)
    increments = _ladbsde_increments(problem, grid, paths, Ys, Zs)
    terminal = problem.terminal(paths.X[:, -1, :])

    targets = list()
    for i in range(grid.N):
        target = ad.constant(terminal)
        for j in range(i, grid.N):
            target = target + increments[j]
        targets.append(target)
    return _ladbsde_locals(Ys, targets, reduction)


def _set_mode(bn_states, mode):
    for state in bn_states.values():
        state.mode = mode


class Scheme:
    """A scheme bound to one problem and grid: network layout, losses, evaluation."""

    def __init__(self, kind, problem, grid, backbone='mlp', L=None, n=None, activation=None,
                 reduction='mean', y0_range=(0.0, 1.0), algorithm='backward'):
        if isinstance(kind, str):
            kind = SCHEME_NAMES.inverse[kind]
        defaults = SCHEME_DEFAULTS[kind]
        d = problem.d
        self.kind = kind
        self.problem = problem
        self.grid = grid
        self.backbone = backbone
        self.L = defaults['L'] if L is None else L
        self.n = d + 10 if n is None else n
        self.activation = defaults['activation'] if activation is None else activation
        self.reduction = reduction
        self.algorithm = algorithm

        if kind == SchemeKind.DBSDE:
            if grid.N < 2:
                raise ValueError(f'DBSDE needs N >= 2, got {grid.N}')
            if backbone != 'mlp':
                raise ValueError('DBSDE step networks are feedforward only')
            self.step_config = MLPConfig(d, d, self.L, self.n, self.activation, batch_norm=True)
            stack = Composite()
            stack.add_child('y0', Free(1, *y0_range))
            stack.add_child('z0', Free(d))
            for i in range(1, grid.N):
                stack.add_child(f'step{i}', self.step_config)
            self.descriptor = stack
            self.network = None
        elif backbone == 'mlp':
            self.descriptor = MLPConfig(d + 1, 1, self.L, self.n, self.activation)
            self.network = MLP(self.descriptor)
        elif backbone == 'rnn':
            self.descriptor = RNNConfig(d + 1, 1, self.n, self.activation)
            self.network = RNN(self.descriptor)
        else:
            raise ValueError(f'unknown backbone {backbone!r}')

    @property
    def name(self):
        return SCHEME_NAMES[self.kind]

    def init_params(self, seed, dist='uniform'):
        return init_params(self.descriptor, seed, dist)

    def init_state(self):
        if self.kind == SchemeKind.DBSDE:
            return init_batch_norm(self.descriptor)
        return dict()

    def published_param_count(self):
        key = {SchemeKind.DBSDE: 'DBSDE', SchemeKind.LDBSDE: 'LDBSDE_paper',
               SchemeKind.LaDBSDE: 'LaDBSDE'}[self.kind]
        return param_count(key, self.problem.d, self.grid.N)

    def true_param_count(self):
        return self.descriptor.param_size()

    def loss(self, params, paths, bn_states=None, training=True, stats=None):
        problem, grid = self.problem, self.grid
        if self.kind == SchemeKind.DBSDE:
            bn_states = bn_states or dict()
            _set_mode(bn_states, BatchNormState.TRAIN if training else BatchNormState.INFERENCE)
            output = dbsde_rollout(problem, grid, paths, params, self.step_config, bn_states, stats)
            return dbsde_loss(output, paths, problem, self.reduction)
        if self.kind == SchemeKind.LDBSDE:
            return ldbsde_loss(problem, grid, paths, self.network, params, self.reduction, training)
        if self.algorithm == 'forward':
            return ladbsde_loss_forward(problem, grid, paths, self.network, params, self.reduction, training)
        return ladbsde_loss_backward(problem, grid, paths, self.network, params, self.reduction, training)

    def evaluate(self, params, paths, bn_states=None):
        if self.kind == SchemeKind.DBSDE:
            bn_states = bn_states or dict()
            _set_mode(bn_states, BatchNormState.INFERENCE)
            output = dbsde_rollout(self.problem, self.grid, paths, params, self.step_config, bn_states)
            return output
        Ys, Zs = network_solution(self.problem, self.grid, paths, self.network, params,
                                  self.grid.N, create_graph=False)
        return SchemeOutput(Ys, Zs)

    def initial_values(self, params, bn_states=None):
        """(Y_0, Z_0) as learned: free parameters for DBSDE, psi and its gradient at (0, x0) otherwise."""
        if self.kind == SchemeKind.DBSDE:
            return float(params.array('y0/value')[0]), params.array('z0/value').copy()
        x0 = self.problem.x0[None, :]
        if self.network.markovian:
            sigma = _sigma_operand(self.problem, 0.0, x0)
            y, z = z_from_network(self.network, params, 0.0, x0, sigma, create_graph=False)
            return y.item(), z.data[0].copy()
        tape = ad.Tape()
        leaf = tape.leaf(np.concatenate([[0.0], self.problem.x0])[None, :])
        y = ad.reshape(self.network.evaluate(params, [leaf])[0], (1,))
        grad = ad.grad_wrt_input(ad.reduce_sum(y), leaf)
        z = self.problem.z_from_gradient(0.0, x0, ad.take(grad, 1, 1, self.problem.d + 1))
        return y.item(), z.data[0].copy()


def evaluate_solution(scheme: Scheme, params, paths, bn_states=None):
    Y, Z, _ = scheme.evaluate(params, paths, bn_states).arrays()
    return Y, Z
