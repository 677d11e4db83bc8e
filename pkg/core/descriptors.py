from copy import deepcopy


class Descriptor:
    def clone(self):
        return deepcopy(self)

    def all_params(self):
        yield from []

    def param_size(self):
        return sum(_size(shape) for _, shape, _ in self.all_params())


def _size(shape):
    n = 1
    for extent in shape:
        n *= extent
    return n


class Dense(Descriptor):
    def __init__(self, n_in, n_out):
        super().__init__()
        self.n_in = n_in
        self.n_out = n_out

    def all_params(self):
        yield 'W', (self.n_in, self.n_out), 'weight'
        yield 'b', (self.n_out,), 'bias'


class BatchNorm(Descriptor):
    def __init__(self, width, momentum=0.99, epsilon=1e-6):
        super().__init__()
        self.width = width
        self.momentum = momentum
        self.epsilon = epsilon

    def all_params(self):
        yield 'gamma', (self.width,), 'scale'
        yield 'beta', (self.width,), 'shift'


class Free(Descriptor):
    def __init__(self, width, low=-0.1, high=0.1):
        super().__init__()
        self.width = width
        self.low = low
        self.high = high

    def all_params(self):
        yield 'value', (self.width,), 'free'


class MLPConfig(Descriptor):
    def __init__(self, d0, d1, L, n, activation='tanh', batch_norm=False):
        super().__init__()
        if min(d0, d1, L, n) < 1:
            raise ValueError(f'MLP needs d0, d1, L, n >= 1, got {(d0, d1, L, n)}')
        self.d0 = d0
        self.d1 = d1
        self.L = L
        self.n = n
        self.activation = activation
        self.batch_norm = batch_norm

    def all_layers(self):
        widths = [self.d0] + [self.n] * self.L + [self.d1]
        for l in range(1, self.L + 2):
            yield f'T{l}', Dense(widths[l - 1], widths[l])
            if self.batch_norm and l <= self.L:
                yield f'bn{l}', BatchNorm(widths[l])

    def all_params(self):
        for name, layer in self.all_layers():
            for pname, shape, kind in layer.all_params():
                yield name + '/' + pname, shape, kind

    def batch_norms(self):
        return [(name, layer) for name, layer in self.all_layers() if isinstance(layer, BatchNorm)]


class RNNConfig(Descriptor):
    def __init__(self, d0, d1, n, activation='tanh'):
        super().__init__()
        if min(d0, d1, n) < 1:
            raise ValueError(f'RNN needs d0, d1, n >= 1, got {(d0, d1, n)}')
        self.d0 = d0
        self.d1 = d1
        self.n = n
        self.activation = activation

    def all_params(self):
        yield 'W_h', (self.n, self.n), 'weight'
        yield 'W_x', (self.d0, self.n), 'weight'
        yield 'b_h', (self.n,), 'bias'
        yield 'W_y', (self.n, self.d1), 'weight'
        yield 'b_y', (self.d1,), 'bias'


class Composite(Descriptor):
    def __init__(self):
        super().__init__()
        self.children = dict()

    def add_child(self, name, descriptor):
        self.children[name] = descriptor

    def get_child(self, name) -> Descriptor:
        return self.children[name]

    def all_params(self):
        for name, child in self.children.items():
            for pname, shape, kind in child.all_params():
                yield name + '/' + pname, shape, kind
