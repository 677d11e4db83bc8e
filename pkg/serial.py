"""On-disk formats: parameter checkpoints, path dumps, CSV tables and the run manifest.

Binary files share one framing: the magic ``FBSDE``, a little-endian uint32
header length, a TOML header and a little-endian float64 blob whose layout
the header describes.
"""

import io
import os
import struct
import tempfile
from contextlib import contextmanager

import numpy as np
import toml
from absl import logging
from bidict import bidict

from version import VERSION

from core.descriptors import BatchNorm, Composite, Dense, Free, MLPConfig, RNNConfig
from core.nets import BatchNormState, ParameterSet, Segment, build_layout
from core.sde import BrownianBatch, PathBatch, TimeGrid
from core.train import AdamState

MAGIC = b'FBSDE'
_LENGTH = struct.Struct('<I')
_FLOAT = np.dtype('<f8')


class CheckpointError(ValueError):
    pass


_DESC_TO_NAME = bidict({
    Dense: 'dense',
    BatchNorm: 'batch_norm',
    Free: 'free',
    MLPConfig: 'mlp',
    RNNConfig: 'rnn',
    Composite: 'stack',
})

_MODE_TO_NAME = bidict({
    BatchNormState.TRAIN: 'train',
    BatchNormState.INFERENCE: 'inference',
})


def _desc_to_dict(desc):
    d = dict()

    d['type'] = _DESC_TO_NAME[type(desc)]

    if isinstance(desc, Dense):
        d['n_in'] = desc.n_in
        d['n_out'] = desc.n_out
    elif isinstance(desc, BatchNorm):
        d['width'] = desc.width
        d['momentum'] = desc.momentum
        d['epsilon'] = desc.epsilon
    elif isinstance(desc, Free):
        d['width'] = desc.width
        d['low'] = desc.low
        d['high'] = desc.high
    elif isinstance(desc, MLPConfig):
        d.update(d0=desc.d0, d1=desc.d1, L=desc.L, n=desc.n,
                 activation=desc.activation, batch_norm=desc.batch_norm)
    elif isinstance(desc, RNNConfig):
        d.update(d0=desc.d0, d1=desc.d1, n=desc.n, activation=desc.activation)
    elif isinstance(desc, Composite):
        d['order'] = list(desc.children)
        d['children'] = {name: _desc_to_dict(child) for name, child in desc.children.items()}

    return d


def _dict_to_desc(d):
    type = _DESC_TO_NAME.inverse[d['type']]

    if type is Dense:
        return Dense(d['n_in'], d['n_out'])
    elif type is BatchNorm:
        return BatchNorm(d['width'], d['momentum'], d['epsilon'])
    elif type is Free:
        return Free(d['width'], d['low'], d['high'])
    elif type is MLPConfig:
        return MLPConfig(d['d0'], d['d1'], d['L'], d['n'], d['activation'], d['batch_norm'])
    elif type is RNNConfig:
        return RNNConfig(d['d0'], d['d1'], d['n'], d['activation'])
    elif type is Composite:
        s = Composite()
        for name in d['order']:
            s.add_child(name, _dict_to_desc(d['children'][name]))
        return s


def _layout_to_list(layout):
    return [dict(name=seg.name, offset=seg.offset, shape=list(seg.shape), kind=seg.kind) for seg in layout]


def _list_to_layout(items):
    return [Segment(item['name'], item['offset'], item['shape'], item['kind']) for item in items]


@contextmanager
def atomic_write(path, mode='wb'):
    """Write to a temporary file next to ``path`` and rename it into place on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.' + os.path.basename(path) + '.')
    try:
        with os.fdopen(fd, mode) as obj:
            yield obj
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_framed(obj, header, arrays):
    encoded = toml.dumps(header).encode('utf-8')
    obj.write(MAGIC)
    obj.write(_LENGTH.pack(len(encoded)))
    obj.write(encoded)
    for array in arrays:
        obj.write(np.ascontiguousarray(array, dtype=_FLOAT).tobytes())


def _read_framed(obj, kind):
    if obj.read(len(MAGIC)) != MAGIC:
        raise CheckpointError('not an FBSDE file (bad magic)')
    (length,) = _LENGTH.unpack(obj.read(_LENGTH.size))
    header = toml.loads(obj.read(length).decode('utf-8'))
    if header.get('version') != VERSION:
        raise CheckpointError(f'file version {header.get("version")} is not supported (expected {VERSION})')
    if header.get('kind') != kind:
        raise CheckpointError(f'expected a {kind} file, found {header.get("kind")!r}')
    data = obj.read()
    if len(data) % _FLOAT.itemsize:
        raise CheckpointError(f'data section of {len(data)} bytes is not a whole number of float64 values')
    blob = np.frombuffer(data, dtype=_FLOAT).astype(np.float64)
    return header, blob


class Checkpoint:
    def __init__(self, params: ParameterSet, step=0, adam: AdamState = None, bn_states=None,
                 descriptor=None, meta=None):
        self.params = params
        self.step = step
        self.adam = adam
        self.bn_states = bn_states or dict()
        self.descriptor = descriptor
        self.meta = dict(meta or {})


def save_checkpoint(path, checkpoint: Checkpoint):
    params = checkpoint.params
    header = dict(version=VERSION, kind='checkpoint', rho=len(params), step=checkpoint.step,
                  meta=checkpoint.meta, layout=_layout_to_list(params.layout))
    arrays = [params.theta]

    if checkpoint.descriptor is not None:
        header['descriptor'] = _desc_to_dict(checkpoint.descriptor)
    if checkpoint.adam is not None:
        adam = checkpoint.adam
        header['adam'] = dict(k=adam.k, beta1=adam.beta1, beta2=adam.beta2, epsilon=adam.epsilon)
        arrays += [adam.m, adam.v]
    header['batch_norm'] = [dict(key=key, width=state.mean.size, momentum=state.momentum,
                                 epsilon=state.epsilon, mode=_MODE_TO_NAME[state.mode])
                            for key, state in checkpoint.bn_states.items()]
    for state in checkpoint.bn_states.values():
        arrays += [state.mean, state.var]

    with atomic_write(path) as obj:
        _write_framed(obj, header, arrays)
    logging.info('wrote checkpoint %s (rho=%d, step %d)', path, len(params), checkpoint.step)


def load_checkpoint(path, expected=None):
    with open(path, 'rb') as obj:
        header, blob = _read_framed(obj, 'checkpoint')

    rho = header['rho']
    layout = _list_to_layout(header['layout'])
    if expected is not None:
        want = expected.layout if isinstance(expected, ParameterSet) else build_layout(expected)
        size = sum(seg.size for seg in want)
        if size != rho:
            raise CheckpointError(f'{path}: checkpoint has rho={rho}, the configured scheme needs {size}')
        if want != layout:
            raise CheckpointError(f'{path}: parameter layout differs from the configured scheme')

    offset = 0

    def take(size):
        nonlocal offset
        if offset + size > blob.size:
            raise CheckpointError(f'{path}: truncated data')
        out = blob[offset:offset + size].copy()
        offset += size
        return out

    params = ParameterSet(take(rho), layout)
    adam = None
    if 'adam' in header:
        a = header['adam']
        adam = AdamState(rho, a['beta1'], a['beta2'], a['epsilon'])
        adam.k = a['k']
        adam.m = take(rho)
        adam.v = take(rho)
    bn_states = dict()
    for item in header.get('batch_norm', []):
        state = BatchNormState(item['width'], item['momentum'], item['epsilon'])
        state.mean = take(item['width'])
        state.var = take(item['width'])
        state.mode = _MODE_TO_NAME.inverse[item['mode']]
        bn_states[item['key']] = state
    if offset != blob.size:
        raise CheckpointError(f'{path}: {blob.size - offset} trailing values')

    descriptor = _dict_to_desc(header['descriptor']) if 'descriptor' in header else None
    return Checkpoint(params, header['step'], adam, bn_states, descriptor, header.get('meta'))


def save_paths(path, paths: PathBatch, problem_id):
    b = paths.brownian
    header = dict(version=VERSION, kind='paths', problem=problem_id, M=paths.M, N=paths.grid.N,
                  d=paths.d, T=paths.grid.T, seed=int(b.seed), stream=int(b.stream),
                  first_sample=int(b.first_sample))
    with atomic_write(path) as obj:
        _write_framed(obj, header, [paths.X, b.increments])
    logging.info('wrote %d paths to %s', paths.M, path)


def load_paths(path):
    with open(path, 'rb') as obj:
        header, blob = _read_framed(obj, 'paths')
    M, N, d = header['M'], header['N'], header['d']
    states = M * (N + 1) * d
    if blob.size != states + M * N * d:
        raise CheckpointError(f'{path}: expected {states + M * N * d} values, found {blob.size}')
    grid = TimeGrid(header['T'], N)
    brownian = BrownianBatch(blob[states:].reshape(M, N, d), grid, header['seed'],
                             header['stream'], header['first_sample'])
    return PathBatch(blob[:states].reshape(M, N + 1, d), grid, brownian), header['problem']


def write_csv(path, frame):
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format='%.10e', na_rep='NA', lineterminator='\n')
    with atomic_write(path, 'w') as obj:
        obj.write(buffer.getvalue())
    logging.info('wrote %s (%d rows)', path, len(frame))


def save_manifest(path, config, runs, files):
    """A versioned TOML manifest; its [config] table is itself a loadable config."""
    manifest = dict(version=VERSION, config=config, runs=list(runs), files=sorted(set(files)))
    with atomic_write(path, 'w') as obj:
        toml.dump(manifest, obj)
    logging.info('wrote manifest %s', path)


def load_manifest(path):
    manifest = toml.load(path)
    if manifest.get('version') != VERSION:
        raise CheckpointError(f'manifest version {manifest.get("version")} is not supported')
    return manifest
