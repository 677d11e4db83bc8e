"""Feedforward and recurrent networks over a flat parameter vector.

A network never owns its weights. Its descriptor fixes a layout of named
segments inside one vector theta, and every forward pass reads the segments
it needs, either as constants from a ``ParameterSet`` or as recorded views of
a tape leaf (``ParameterSet.bind``), which is what training differentiates.
"""

import numpy as np

from . import autodiff as ad
from .descriptors import BatchNorm, Composite, Dense, Descriptor, Free, MLPConfig, RNNConfig


class Segment:
    __slots__ = ('name', 'offset', 'shape', 'kind')

    def __init__(self, name, offset, shape, kind):
        self.name = name
        self.offset = offset
        self.shape = tuple(shape)
        self.kind = kind

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    def __eq__(self, other):
        return (self.name, self.offset, self.shape, self.kind) == \
            (other.name, other.offset, other.shape, other.kind)

    def __repr__(self):
        return f'Segment({self.name!r}, {self.offset}, {self.shape})'


def build_layout(descriptor: Descriptor):
    layout = list()
    offset = 0
    for name, shape, kind in descriptor.all_params():
        seg = Segment(name, offset, shape, kind)
        layout.append(seg)
        offset += seg.size
    return layout


class ParameterSet:
    def __init__(self, theta, layout):
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        size = sum(seg.size for seg in layout)
        if theta.shape != (size,):
            raise ValueError(f'theta has shape {theta.shape}, layout covers {size} entries')
        self.theta = theta
        self.layout = list(layout)
        self._index = {seg.name: seg for seg in self.layout}

    def __len__(self):
        return self.theta.size

    def segment(self, name):
        return self._index[name]

    def names(self):
        return [seg.name for seg in self.layout]

    def array(self, name):
        seg = self._index[name]
        return self.theta[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def __getitem__(self, name):
        return ad.constant(self.array(name))

    def copy(self):
        return ParameterSet(self.theta.copy(), self.layout)

    def with_theta(self, theta):
        return ParameterSet(theta, self.layout)

    def bind(self, theta_tensor):
        return BoundParameters(theta_tensor, self)


class BoundParameters:
    def __init__(self, theta, params: ParameterSet):
        self.theta = theta
        self.params = params
        self._views = dict()

    def __getitem__(self, name):
        view = self._views.get(name)
        if view is None:
            seg = self.params.segment(name)
            flat = ad.take(self.theta, 0, seg.offset, seg.offset + seg.size)
            view = self._views[name] = ad.reshape(flat, seg.shape)
        return view


class BatchNormState:
    TRAIN, INFERENCE = range(2)

    def __init__(self, width, momentum=0.99, epsilon=1e-6):
        self.mean = np.zeros(width)
        self.var = np.ones(width)
        self.momentum = momentum
        self.epsilon = epsilon
        self.mode = BatchNormState.TRAIN

    def update(self, batch_mean, batch_var):
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * batch_mean
        self.var = m * self.var + (1.0 - m) * np.maximum(batch_var, 0.0)


def init_batch_norm(descriptor: Descriptor, prefix=''):
    states = dict()
    if isinstance(descriptor, MLPConfig):
        for name, layer in descriptor.batch_norms():
            states[prefix + name] = BatchNormState(layer.width, layer.momentum, layer.epsilon)
    elif isinstance(descriptor, Composite):
        for name, child in descriptor.children.items():
            states.update(init_batch_norm(child, prefix + name + '/'))
    return states


def _init_segment(rng, seg, dist, descriptor_of):
    if seg.kind == 'weight':
        n_in, n_out = seg.shape
        if dist == 'uniform':
            limit = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-limit, limit, size=seg.shape)
        return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=seg.shape)
    if seg.kind == 'scale':
        return np.ones(seg.shape)
    if seg.kind == 'free':
        free = descriptor_of(seg.name)
        return rng.uniform(free.low, free.high, size=seg.shape)
    return np.zeros(seg.shape)


def _find_free(descriptor, name):
    parts = name.split('/')
    desc = descriptor
    for part in parts[:-1]:
        desc = desc.get_child(part)
    return desc


def init_params(config: Descriptor, seed, dist='uniform'):
    if dist not in ('uniform', 'normal'):
        raise ValueError(f'unknown initialisation {dist!r}')
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    layout = build_layout(config)
    theta = np.empty(sum(seg.size for seg in layout))
    for seg in layout:
        value = _init_segment(rng, seg, dist, lambda name: _find_free(config, name))
        theta[seg.offset:seg.offset + seg.size] = np.ravel(value)
    return ParameterSet(theta, layout)


def _affine(h, params, prefix):
    rows = h.shape[0]
    return ad.matmul(h, params[prefix + '/W']) + ad.repeat(params[prefix + '/b'], 0, rows)


def _batch_norm(h, params, prefix, state, stats):
    rows = h.shape[0]
    if state is None or state.mode == BatchNormState.TRAIN:
        eps = 1e-6 if state is None else state.epsilon
        mu = ad.mean(h, axis=0)
        centered = h - ad.repeat(mu, 0, rows)
        var = ad.mean(ad.square(centered), axis=0)
        inv = ad.power(var + eps, -0.5)
        normed = centered * ad.repeat(inv, 0, rows)
        if stats is not None:
            stats.append((prefix, mu.data.copy(), var.data.copy()))
    else:
        inv = 1.0 / np.sqrt(state.var + state.epsilon)
        normed = (h - np.broadcast_to(state.mean, h.shape)) * np.broadcast_to(inv, h.shape)
    return normed * ad.repeat(params[prefix + '/gamma'], 0, rows) + \
        ad.repeat(params[prefix + '/beta'], 0, rows)


def mlp_forward(config: MLPConfig, params, x, prefix='', bn_states=None, stats=None):
    """T_{L+1} o act o T_L o ... o act o T_1 applied to rows of ``x``.

    ``params`` is a ParameterSet or BoundParameters; ``prefix`` locates this
    network inside a larger layout. Batch statistics used in training mode
    are appended to ``stats`` as (layer path, mean, var).
    """
    x = ad.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != config.d0:
        raise ad.ShapeError(f'mlp_forward: input shape {x.shape} does not match width {config.d0}')

    h = x
    for l in range(1, config.L + 2):
        h = _affine(h, params, f'{prefix}T{l}')
        if l > config.L:
            break
        if config.batch_norm:
            key = f'{prefix}bn{l}'
            state = None if bn_states is None else bn_states.get(key)
            h = _batch_norm(h, params, key, state, stats)
        h = ad.activation(config.activation, h)

    if single:
        h = ad.reshape(h, (config.d1,))
    return h


def rnn_forward(config: RNNConfig, params, xs, prefix=''):
    """h_i = act(h_{i-1} W_h + x_i W_x + b_h), y_i = h_i W_y + b_y with h_0 = 0."""
    xs = [ad.as_tensor(x) for x in xs]
    if not xs:
        raise ValueError('rnn_forward: empty input sequence')
    single = xs[0].ndim == 1
    rows = 1 if single else xs[0].shape[0]

    h = ad.constant(np.zeros((rows, config.n)))
    ys = list()
    for x in xs:
        if single:
            x = ad.reshape(x, (1, x.shape[0]))
        if x.shape != (rows, config.d0):
            raise ad.ShapeError(f'rnn_forward: input shape {x.shape} does not match width {config.d0}')
        pre = ad.matmul(h, params[prefix + 'W_h']) + ad.matmul(x, params[prefix + 'W_x']) + \
            ad.repeat(params[prefix + 'b_h'], 0, rows)
        h = ad.activation(config.activation, pre)
        y = ad.matmul(h, params[prefix + 'W_y']) + ad.repeat(params[prefix + 'b_y'], 0, rows)
        ys.append(ad.reshape(y, (config.d1,)) if single else y)
    return ys


class Network:
    """A scalar-output network psi(t, x) used by the single-network schemes."""

    def __init__(self, descriptor):
        self.descriptor = descriptor

    def init_params(self, seed, dist='uniform'):
        return init_params(self.descriptor, seed, dist)

    def evaluate(self, params, inputs):
        raise NotImplementedError

    @property
    def markovian(self):
        raise NotImplementedError


class MLP(Network):
    markovian = True

    def evaluate(self, params, inputs):
        return [mlp_forward(self.descriptor, params, x) for x in inputs]


class RNN(Network):
    markovian = False

    def evaluate(self, params, inputs):
        return rnn_forward(self.descriptor, params, inputs)


def mlp_param_count(d0, d1, L, n):
    return n * (d0 + 1) + n * (n + 1) * (L - 1) + d1 * (n + 1)


def param_count(scheme, d, N=None):
    """Parameter dimension rho as the published formula for each scheme gives it."""
    if d < 1:
        raise ValueError(f'dimension must be >= 1, got {d}')
    if scheme == 'DBSDE':
        if N is None or N < 2:
            raise ValueError(f'DBSDE needs N >= 2, got {N}')
        return d + 1 + (N - 1) * (2 * d * (d + 10) + (d + 10) ** 2 + 4 * (d + 10) + 2 * d)
    if scheme == 'LDBSDE_original':
        return 256 * d + 198145
    if scheme in ('LDBSDE_paper', 'LaDBSDE'):
        return 2 * d * d + 56 * d + 361
    raise ValueError(f'unknown scheme {scheme!r}')


__all__ = [
    'BatchNorm', 'Dense', 'Free', 'Composite', 'MLPConfig', 'RNNConfig',
    'Segment', 'ParameterSet', 'BoundParameters', 'BatchNormState',
    'build_layout', 'init_params', 'init_batch_norm', 'mlp_forward', 'rnn_forward',
    'Network', 'MLP', 'RNN', 'mlp_param_count', 'param_count',
]
