"""Dense float64 tensors recorded on a tape for reverse-mode differentiation.

Every op is an entry in two dispatch tables: ``FORWARD`` maps an op kind to
a numpy function, ``BACKWARD`` maps it to a rule written with the same
tensor ops, so a gradient can itself be recorded (``create_graph=True``).
That is how the Z process, an input gradient of the network, still passes
parameter gradients through to the loss.

A tape is a ``networkx.DiGraph`` whose nodes are appended in evaluation
order, which makes the append order a topological order of the graph.
"""

import numpy as np
import networkx as nx


class ShapeError(ValueError):
    pass


class TapeError(ValueError):
    pass


class Entry:
    __slots__ = ('kind', 'inputs', 'attrs', 'output')

    def __init__(self, kind, inputs, attrs, output):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.output = output


class Tape:
    def __init__(self):
        self.graph = nx.DiGraph()
        self.entries = list()

    def __len__(self):
        return len(self.entries)

    def leaf(self, value, name=None):
        t = Tensor(value)
        self._append('leaf', (), dict(name=name), t)
        return t

    def record(self, kind, inputs, attrs, output):
        self._append(kind, inputs, attrs, output)
        return output

    def is_leaf(self, t):
        return t.tape is self and self.entries[t.node].kind == 'leaf'

    def _append(self, kind, inputs, attrs, output):
        index = len(self.entries)
        self.entries.append(Entry(kind, inputs, attrs, output))
        self.graph.add_node(index, kind=kind)
        for t in inputs:
            if t.node is not None:
                self.graph.add_edge(t.node, index)
        output.tape = self
        output.node = index


class Tensor:
    __slots__ = ('data', 'tape', 'node')

    __array_priority__ = 100

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError('div: only division by a python scalar is supported')
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        raise TypeError('use take() to slice a tensor')

    def __repr__(self):
        tag = '' if self.node is None else f', node={self.node}'
        return f'Tensor(shape={self.shape}{tag})'


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value):
    return Tensor(value)


def _common_tape(inputs):
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError('tensors recorded on different tapes cannot be mixed')
    return tape


# forward rules (numpy level)

def _elementwise_check(kind, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f'{kind}: shapes {a.shape} and {b.shape} do not conform')


def _forward_add(a, b):
    _elementwise_check('add', a, b)
    return a + b


def _forward_sub(a, b):
    _elementwise_check('sub', a, b)
    return a - b


def _forward_mul(a, b):
    _elementwise_check('mul', a, b)
    return a * b


def _forward_matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f'matmul: shapes {a.shape} and {b.shape} do not conform')
    return a @ b


def _forward_scale(a, factor):
    return a * factor


def _forward_sum(a, axis=None):
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f'sum: axis {axis} out of range for shape {a.shape}')
    return np.sum(a, axis=axis)


def _forward_reshape(a, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f'reshape: cannot reshape {a.shape} into {tuple(shape)}')
    return a.reshape(shape)


def _slicer(ndim, axis, start, stop):
    index = [slice(None)] * ndim
    index[axis] = slice(start, stop)
    return tuple(index)


def _forward_take(a, axis, start, stop):
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f'take: range [{start}, {stop}) outside axis {axis} of {a.shape}')
    return a[_slicer(a.ndim, axis, start, stop)]


def _forward_place(a, axis, size, start):
    if start < 0 or start + a.shape[axis] > size:
        raise ShapeError(f'place: {a.shape} does not fit at {start} in axis {axis} of size {size}')
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape)
    out[_slicer(a.ndim, axis, start, start + a.shape[axis])] = a
    return out


def _forward_repeat(a, axis, count):
    return np.repeat(np.expand_dims(a, axis), count, axis=axis)


def _forward_vecmat(a, s):
    if a.ndim != 2 or s.ndim != 3 or s.shape[:2] != a.shape:
        raise ShapeError(f'vecmat: shapes {a.shape} and {s.shape} do not conform')
    return np.einsum('mk,mkn->mn', a, s)


def _forward_relu(a):
    return np.maximum(a, 0.0)


def _forward_power(a, exponent):
    return np.power(a, exponent)


FORWARD = {
    'add': _forward_add,
    'sub': _forward_sub,
    'mul': _forward_mul,
    'matmul': _forward_matmul,
    'scale': _forward_scale,
    'sum': _forward_sum,
    'square': np.square,
    'abs': np.abs,
    'tanh': np.tanh,
    'sin': np.sin,
    'cos': np.cos,
    'exp': np.exp,
    'relu': _forward_relu,
    'power': _forward_power,
    'reshape': _forward_reshape,
    'transpose': np.transpose,
    'take': _forward_take,
    'place': _forward_place,
    'repeat': _forward_repeat,
    'vecmat': _forward_vecmat,
}


def forward_op(kind, *inputs, **attrs):
    inputs = tuple(map(as_tensor, inputs))
    value = FORWARD[kind](*(t.data for t in inputs), **attrs)
    out = Tensor(value)
    tape = _common_tape(inputs)
    if tape is not None:
        tape.record(kind, inputs, attrs, out)
    return out


def add(a, b):
    return forward_op('add', a, b)


def sub(a, b):
    return forward_op('sub', a, b)


def mul(a, b):
    return forward_op('mul', a, b)


def matmul(a, b):
    return forward_op('matmul', a, b)


def scale(a, factor):
    return forward_op('scale', a, factor=float(factor))


def reduce_sum(a, axis=None):
    return forward_op('sum', a, axis=axis)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / count)


def square(a):
    return forward_op('square', a)


def absolute(a):
    return forward_op('abs', a)


def tanh(a):
    return forward_op('tanh', a)


def sin(a):
    return forward_op('sin', a)


def cos(a):
    return forward_op('cos', a)


def exp(a):
    return forward_op('exp', a)


def relu(a):
    return forward_op('relu', a)


def power(a, exponent):
    return forward_op('power', a, exponent=float(exponent))


def reshape(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return forward_op('reshape', a, shape=tuple(shape))


def transpose(a):
    return forward_op('transpose', a)


def take(a, axis, start, stop):
    return forward_op('take', a, axis=axis, start=start, stop=stop)


def place(a, axis, size, start):
    return forward_op('place', a, axis=axis, size=size, start=start)


def repeat(a, axis, count):
    return forward_op('repeat', a, axis=axis, count=count)


def vecmat(a, s):
    s = as_tensor(s)
    if s.tape is not None:
        raise TapeError('vecmat: the matrix operand must be a constant')
    return forward_op('vecmat', a, s)


ACTIVATIONS = {
    'tanh': tanh,
    'sin': sin,
    'relu': relu,
}


def activation(kind, x):
    return ACTIVATIONS[kind](x)


# backward rules (tensor level, recordable)

def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return reduce_sum(g)


def _backward_add(g, inputs, out):
    a, b = inputs
    return _reduce_to(g, a.shape), _reduce_to(g, b.shape)


def _backward_sub(g, inputs, out):
    a, b = inputs
    return _reduce_to(g, a.shape), _reduce_to(scale(g, -1.0), b.shape)


def _backward_mul(g, inputs, out):
    a, b = inputs
    return _reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape)


def _backward_matmul(g, inputs, out):
    a, b = inputs
    a2 = a if a.ndim == 2 else reshape(a, (1, a.shape[0]))
    b2 = b if b.ndim == 2 else reshape(b, (b.shape[0], 1))
    g2 = reshape(g, (a2.shape[0], b2.shape[1]))
    ga = reshape(matmul(g2, transpose(b2)), a.shape)
    gb = reshape(matmul(transpose(a2), g2), b.shape)
    return ga, gb


def _backward_scale(g, inputs, out, factor):
    return scale(g, factor),


def _backward_sum(g, inputs, out, axis=None):
    a, = inputs
    if axis is None:
        return mul(g, np.ones(a.shape)),
    return repeat(g, axis % a.ndim, a.shape[axis]),


def _backward_square(g, inputs, out):
    a, = inputs
    return scale(mul(g, a), 2.0),


def _backward_abs(g, inputs, out):
    a, = inputs
    return mul(g, np.sign(a.data)),


def _backward_tanh(g, inputs, out):
    return mul(g, sub(1.0, square(out))),


def _backward_sin(g, inputs, out):
    a, = inputs
    return mul(g, cos(a)),


def _backward_cos(g, inputs, out):
    a, = inputs
    return scale(mul(g, sin(a)), -1.0),


def _backward_exp(g, inputs, out):
    return mul(g, out),


def _backward_relu(g, inputs, out):
    a, = inputs
    # subgradient 0 at exactly 0
    return mul(g, (a.data > 0.0).astype(np.float64)),


def _backward_power(g, inputs, out, exponent):
    a, = inputs
    return mul(g, scale(power(a, exponent - 1.0), exponent)),


def _backward_reshape(g, inputs, out, shape):
    a, = inputs
    return reshape(g, a.shape),


def _backward_transpose(g, inputs, out):
    return transpose(g),


def _backward_take(g, inputs, out, axis, start, stop):
    a, = inputs
    return place(g, axis, a.shape[axis], start),


def _backward_place(g, inputs, out, axis, size, start):
    a, = inputs
    return take(g, axis, start, start + a.shape[axis]),


def _backward_repeat(g, inputs, out, axis, count):
    return reduce_sum(g, axis),


def _backward_vecmat(g, inputs, out):
    a, s = inputs
    return vecmat(g, np.transpose(s.data, (0, 2, 1))), None


BACKWARD = {
    'add': _backward_add,
    'sub': _backward_sub,
    'mul': _backward_mul,
    'matmul': _backward_matmul,
    'scale': _backward_scale,
    'sum': _backward_sum,
    'square': _backward_square,
    'abs': _backward_abs,
    'tanh': _backward_tanh,
    'sin': _backward_sin,
    'cos': _backward_cos,
    'exp': _backward_exp,
    'relu': _backward_relu,
    'power': _backward_power,
    'reshape': _backward_reshape,
    'transpose': _backward_transpose,
    'take': _backward_take,
    'place': _backward_place,
    'repeat': _backward_repeat,
    'vecmat': _backward_vecmat,
}


class GradientMap:
    def __init__(self, leaves, grads):
        self._leaves = list(leaves)
        self._grads = grads

    def __getitem__(self, leaf):
        for i, t in enumerate(self._leaves):
            if t is leaf:
                return self._grads[i]
        raise KeyError(repr(leaf))

    def __len__(self):
        return len(self._leaves)

    def __iter__(self):
        return iter(zip(self._leaves, self._grads))


def backward(output, leaves, create_graph=False):
    """Reverse accumulation from a scalar ``output`` to every tensor in ``leaves``.

    With ``create_graph`` the rules are evaluated on the recorded tensors, so
    the returned gradients are themselves on the tape and can be
    differentiated again. Leaves outside the ancestor set of ``output`` get
    zero gradients.
    """
    if output.node is None:
        raise TapeError('backward: output is not recorded on a tape')
    if output.size != 1:
        raise TapeError(f'backward: output must be a scalar, got shape {output.shape}')

    tape = output.tape
    leaves = list(leaves)
    for leaf in leaves:
        if leaf.tape is not None and leaf.tape is not tape:
            raise TapeError('backward: leaf belongs to another tape')

    wanted = set(t.node for t in leaves if t.node is not None)
    relevant = nx.ancestors(tape.graph, output.node)
    relevant.add(output.node)

    grads = {output.node: Tensor(np.ones(output.shape))}

    for index in sorted(relevant, reverse=True):
        g = grads.get(index) if index in wanted else grads.pop(index, None)
        if g is None:
            continue
        entry = tape.entries[index]
        if entry.kind == 'leaf':
            continue

        if create_graph:
            inputs, out = entry.inputs, entry.output
        else:
            inputs = tuple(t.detach() for t in entry.inputs)
            out = entry.output.detach()
            g = g.detach()

        parent_grads = BACKWARD[entry.kind](g, inputs, out, **entry.attrs)

        for t, pg in zip(entry.inputs, parent_grads):
            if pg is None or t.node is None:
                continue
            if t.node in grads:
                grads[t.node] = add(grads[t.node], pg)
            else:
                grads[t.node] = pg

    result = list()
    for leaf in leaves:
        g = grads.get(leaf.node) if leaf.node in relevant else None
        result.append(g if g is not None else Tensor(np.zeros(leaf.shape)))

    return GradientMap(leaves, result)


def grad_wrt_input(output, input, create_graph=False):
    if input.tape is None or not input.tape.is_leaf(input):
        raise TapeError('grad_wrt_input: input must be a leaf of the tape')
    return backward(output, [input], create_graph=create_graph)[input]
