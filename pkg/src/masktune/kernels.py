"""Elementwise hot loops: purity, gate sampling and bit packing.

Every kernel has a numba and a pure-numpy implementation that produce
bitwise-identical results. The public purity and gate functions dispatch on
``masktune._accel.NUMBA_ENABLED``; bit packing always uses numpy. The private
``*_numpy`` / ``*_numba`` variants stay importable for the benchmark and the
equivalence tests.
"""

import numpy as np

from ._accel import NUMBA_ENABLED, njit

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


# -- purity ------------------------------------------------------------------

def _purity_numpy(g_ce, g_kl):
    g_ce = np.asarray(g_ce, dtype=np.float64)
    g_kl = np.asarray(g_kl, dtype=np.float64)
    out = np.ones(np.broadcast(g_ce, g_kl).shape)
    pos = (g_ce > 0) & (g_kl < 0)
    neg = (g_ce < 0) & (g_kl > 0)
    conflict = pos | neg
    a = np.broadcast_to(g_ce, out.shape)[conflict]
    b = np.broadcast_to(g_kl, out.shape)[conflict]
    ratio = (a + b) / (np.abs(a) + np.abs(b))
    sign = np.where(pos[conflict], 1.0, -1.0)
    out[conflict] = (1.0 + sign * ratio) / 2.0
    return np.clip(out, 0.0, 1.0)


@njit
def _purity_loop(g_ce, g_kl, out):
    for i in range(g_ce.size):
        a = g_ce[i]
        b = g_kl[i]
        if a > 0.0 and b < 0.0:
            p = (1.0 + (a + b) / (abs(a) + abs(b))) / 2.0
        elif a < 0.0 and b > 0.0:
            p = (1.0 + -1.0 * ((a + b) / (abs(a) + abs(b)))) / 2.0
        else:
            p = 1.0
        if p < 0.0:
            p = 0.0
        elif p > 1.0:
            p = 1.0
        out[i] = p


def _purity_numba(g_ce, g_kl):
    g_ce, g_kl = np.broadcast_arrays(np.asarray(g_ce, dtype=np.float64),
                                     np.asarray(g_kl, dtype=np.float64))
    shape = g_ce.shape
    out = np.empty(g_ce.size)
    _purity_loop(np.ascontiguousarray(g_ce).ravel(), np.ascontiguousarray(g_kl).ravel(), out)
    return out.reshape(shape)


def purity_compact(g_ce, g_kl):
    """Single-expression purity with ``sgn``; undefined when both inputs are 0.

    Kept as an independent cross-check of the piecewise kernel.
    """
    g_ce = np.asarray(g_ce, dtype=np.float64)
    g_kl = np.asarray(g_kl, dtype=np.float64)
    return 0.5 * (1.0 + np.sign(g_ce) * (g_ce + g_kl) / (np.abs(g_ce) + np.abs(g_kl)))


# -- counter-based uniforms ---------------------------------------------------

def _uniform_numpy(key, counter0, n):
    counters = np.arange(n, dtype=np.uint64) + np.uint64(counter0) + np.uint64(1)
    z = np.uint64(key) + counters * _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * _INV53


@njit
def _uniform_loop(key, counter0, out):
    gamma = np.uint64(0x9E3779B97F4A7C15)
    m1 = np.uint64(0xBF58476D1CE4E5B9)
    m2 = np.uint64(0x94D049BB133111EB)
    for i in range(out.size):
        z = key + (counter0 + np.uint64(i) + np.uint64(1)) * gamma
        z = (z ^ (z >> np.uint64(30))) * m1
        z = (z ^ (z >> np.uint64(27))) * m2
        z = z ^ (z >> np.uint64(31))
        out[i] = np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def _uniform_numba(key, counter0, n):
    out = np.empty(n)
    # uint64 wraparound is the point; only the uncompiled fallback would warn
    with np.errstate(over="ignore"):
        _uniform_loop(np.uint64(key), np.uint64(counter0), out)
    return out


@njit
def _gate_loop(p, key, counter0, out):
    gamma = np.uint64(0x9E3779B97F4A7C15)
    m1 = np.uint64(0xBF58476D1CE4E5B9)
    m2 = np.uint64(0x94D049BB133111EB)
    for i in range(p.size):
        z = key + (counter0 + np.uint64(i) + np.uint64(1)) * gamma
        z = (z ^ (z >> np.uint64(30))) * m1
        z = (z ^ (z >> np.uint64(27))) * m2
        z = z ^ (z >> np.uint64(31))
        u = np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        out[i] = 1 if p[i] > u else 0


def _gate_numpy(p, key, counter0):
    p = np.asarray(p, dtype=np.float64)
    u = _uniform_numpy(key, counter0, p.size).reshape(p.shape)
    return (p > u).astype(np.uint8)


def _gate_numba(p, key, counter0):
    p = np.ascontiguousarray(p, dtype=np.float64)
    out = np.empty(p.size, dtype=np.uint8)
    with np.errstate(over="ignore"):
        _gate_loop(p.ravel(), np.uint64(key), np.uint64(counter0), out)
    return out.reshape(p.shape)


# -- bit packing ----------------------------------------------------------------

def _pack_numpy(bits):
    return np.packbits(np.asarray(bits, dtype=np.uint8).ravel(), bitorder="big")


@njit
def _pack_loop(bits, out):
    for i in range(bits.size):
        if bits[i]:
            out[i >> 3] |= np.uint8(0x80 >> (i & 7))


def _pack_numba(bits):
    bits = np.ascontiguousarray(bits, dtype=np.uint8).ravel()
    out = np.zeros((bits.size + 7) // 8, dtype=np.uint8)
    _pack_loop(bits, out)
    return out


def _unpack_numpy(payload, nbits):
    return np.unpackbits(np.asarray(payload, dtype=np.uint8), count=nbits, bitorder="big")


@njit
def _unpack_loop(payload, out):
    for i in range(out.size):
        out[i] = (payload[i >> 3] >> (7 - (i & 7))) & 1


def _unpack_numba(payload, nbits):
    out = np.empty(nbits, dtype=np.uint8)
    _unpack_loop(np.ascontiguousarray(payload, dtype=np.uint8), out)
    return out


if NUMBA_ENABLED:
    purity_field = _purity_numba
    counter_uniform = _uniform_numba
    gate_field = _gate_numba
else:
    purity_field = _purity_numpy
    counter_uniform = _uniform_numpy
    gate_field = _gate_numpy

# np.packbits is already compiled and beats the loop (see benchmarks/)
pack_bits = _pack_numpy
unpack_bits = _unpack_numpy

