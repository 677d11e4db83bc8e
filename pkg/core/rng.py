"""Counter-based standard normals.

Every draw is a pure function of (seed, stream, sample, step, component):
the key is hashed with the splitmix64 finalizer and two hashed lanes feed a
Box-Muller transform. No generator state is carried between draws, so any
entry can be regenerated alone and samples can be filled in any order.
"""

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0


@nb.njit(nogil=True, cache=True)
def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@nb.njit(nogil=True, cache=True)
def _key(seed, stream, sample, step):
    h = _mix(seed)
    h = _mix(h ^ stream)
    h = _mix(h ^ sample)
    return _mix(h ^ step)


@nb.njit(nogil=True, cache=True)
def _normal(key, component):
    lane = np.uint64(component) * _TWO
    h1 = _mix(key ^ lane)
    h2 = _mix(key ^ (lane + _ONE))
    # u1 in (0, 1], u2 in [0, 1)
    u1 = (np.float64(h1 >> _S11) + 1.0) * _INV53
    u2 = np.float64(h2 >> _S11) * _INV53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@nb.njit(parallel=True, cache=True)
def _fill(out, seed, stream, first_sample):
    M, N, d = out.shape
    for m in nb.prange(M):
        sample = np.uint64(first_sample + m)
        for i in range(N):
            key = _key(seed, stream, sample, np.uint64(i))
            for j in range(d):
                out[m, i, j] = _normal(key, j)


def standard_normals(seed, stream, M, N, d, first_sample=0):
    """An (M, N, d) array of N(0, 1) draws keyed by (seed, stream, sample, step, component)."""
    out = np.empty((M, N, d))
    _fill(out, np.uint64(seed), np.uint64(stream), int(first_sample))
    return out


def normal_at(seed, stream, sample, step, component):
    key = _key(np.uint64(seed), np.uint64(stream), np.uint64(sample), np.uint64(step))
    return float(_normal(key, component))
