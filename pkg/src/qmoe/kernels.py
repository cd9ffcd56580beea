"""Hot inner loops, each in two bit-identical flavours.

Every kernel has a vectorised numpy implementation and an explicit-loop
implementation compiled with numba. The module-level names (``matmul_f32``,
``pack_stream`` ...) point at the numba flavour unless ``QMOE_BACKEND=numpy``
is set or numba is missing. ``IMPLEMENTATIONS`` exposes both flavours so tests
and ``benchmarks/bench_backends.py`` can compare them directly.
"""

import numpy as np

from ._jit import BACKEND, HAVE_NUMBA, njit

# ---------------------------------------------------------------------------
# ordered float32 matmul
# ---------------------------------------------------------------------------
# Every output element is accumulated as c[i, j] = ((0 + a[i,0]b[0,j]) + a[i,1]b[1,j]) + ...
# in float32, strictly in k order. Both flavours follow that order, so results
# are bit-identical between them and across runs.


def _matmul_numpy(a, b):
    n, k = a.shape
    c = np.zeros((n, b.shape[1]), dtype=np.float32)
    for p in range(k):
        c += a[:, p, None] * b[p]
    return c


def _matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    c = np.zeros((n, m), dtype=np.float32)
    for i in range(n):
        for p in range(k):
            av = a[i, p]
            for j in range(m):
                c[i, j] += av * b[p, j]
    return c


# ---------------------------------------------------------------------------
# LSB-first bit stream packing of unsigned codes
# ---------------------------------------------------------------------------


def _pack_stream_numpy(values, bits):
    n = values.shape[0]
    shifts = np.arange(bits, dtype=np.uint32)
    stream = ((values[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    out = np.packbits(stream, bitorder="little")
    return out[: (n * bits + 7) // 8]


def _pack_stream_loops(values, bits):
    n = values.shape[0]
    out = np.zeros((n * bits + 7) // 8, dtype=np.uint8)
    pos = 0
    for i in range(n):
        v = values[i]
        for b in range(bits):
            if (v >> b) & 1:
                out[pos >> 3] |= np.uint8(1 << (pos & 7))
            pos += 1
    return out


def _unpack_stream_numpy(payload, bits, count):
    stream = np.unpackbits(payload, bitorder="little")[: count * bits]
    weights = np.left_shift(np.uint32(1), np.arange(bits, dtype=np.uint32))
    return (stream.reshape(count, bits).astype(np.uint32) * weights).sum(axis=1, dtype=np.uint32)


def _unpack_stream_loops(payload, bits, count):
    out = np.zeros(count, dtype=np.uint32)
    pos = 0
    for i in range(count):
        v = np.uint32(0)
        for b in range(bits):
            if (payload[pos >> 3] >> (pos & 7)) & 1:
                v |= np.uint32(1 << b)
            pos += 1
        out[i] = v
    return out


# ---------------------------------------------------------------------------
# row-wise bit packing into uint64 words, and XOR-popcount
# ---------------------------------------------------------------------------


def _pack_rows_numpy(bits):
    rows, d = bits.shape
    words = (d + 63) // 64
    padded = np.zeros((rows, words * 64), dtype=np.uint8)
    padded[:, :d] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").reshape(rows, words)


def _pack_rows_loops(bits):
    rows, d = bits.shape
    words = (d + 63) // 64
    out = np.zeros((rows, words), dtype=np.uint64)
    for r in range(rows):
        for w in range(words):
            acc = np.uint64(0)
            for j in range(min(64, d - 64 * w)):
                acc |= np.uint64(bits[r, 64 * w + j] != 0) << np.uint64(j)
            out[r, w] = acc
    return out


def _xor_popcount_numpy(x, w):
    out = np.empty((x.shape[0], w.shape[0]), dtype=np.int64)
    for r in range(x.shape[0]):
        out[r] = np.bitwise_count(x[r] ^ w).sum(axis=1, dtype=np.int64)
    return out


def _popcount64(v):
    v = v - ((v >> np.uint64(1)) & np.uint64(0x5555555555555555))
    v = (v & np.uint64(0x3333333333333333)) + ((v >> np.uint64(2)) & np.uint64(0x3333333333333333))
    v = (v + (v >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (v * np.uint64(0x0101010101010101)) >> np.uint64(56)


def _xor_popcount_loops(x, w):
    n = x.shape[0]
    m = w.shape[0]
    words = x.shape[1]
    out = np.zeros((n, m), dtype=np.int64)
    for i in range(n):
        for j in range(m):
            acc = 0
            for t in range(words):
                acc += _popcount64_jit(x[i, t] ^ w[j, t])
            out[i, j] = acc
    return out


# ---------------------------------------------------------------------------
# BitLinear rounding: round_half_away((w - mean) * qmax / span) in float64
# ---------------------------------------------------------------------------


def _bitlinear_round_numpy(w, mean, qmax, span):
    v = (w.astype(np.float64) - mean) * qmax / span
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def _bitlinear_round_loops(w, mean, qmax, span):
    out = np.empty(w.shape[0], dtype=np.int64)
    for i in range(w.shape[0]):
        v = (np.float64(w[i]) - mean) * qmax / span
        r = np.floor(np.abs(v) + 0.5)
        out[i] = np.int64(-r) if v < 0 else np.int64(r)
    return out


# ---------------------------------------------------------------------------
# Adam moment update, float32 throughout
# ---------------------------------------------------------------------------


def _adam_numpy(p, g, m, v, lr, b1, b2, c1, c2, eps, decay):
    # scalars arrive as float32; every operation rounds to float32
    if decay != np.float32(1.0):
        p *= decay
    m *= b1
    m += (np.float32(1.0) - b1) * g
    v *= b2
    v += (np.float32(1.0) - b2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _adam_loops(p, g, m, v, lr, b1, b2, c1, c2, eps, decay):
    one = np.float32(1.0)
    for i in range(p.shape[0]):
        if decay != one:
            p[i] = p[i] * decay
        m[i] = m[i] * b1
        m[i] = m[i] + (one - b1) * g[i]
        v[i] = v[i] * b2
        v[i] = v[i] + ((one - b2) * g[i]) * g[i]
        p[i] = p[i] - (lr * (m[i] / c1)) / (np.sqrt(v[i] / c2) + eps)


if HAVE_NUMBA:
    _popcount64_jit = njit(inline="always")(_popcount64)
    _matmul_numba = njit(cache=True)(_matmul_loops)
    _pack_stream_numba = njit(cache=True)(_pack_stream_loops)
    _unpack_stream_numba = njit(cache=True)(_unpack_stream_loops)
    _pack_rows_numba = njit(cache=True)(_pack_rows_loops)
    _xor_popcount_numba = njit(cache=True)(_xor_popcount_loops)
    _bitlinear_round_numba = njit(cache=True)(_bitlinear_round_loops)
    _adam_numba = njit(cache=True)(_adam_loops)
else:  # pragma: no cover - exercised only without numba
    _popcount64_jit = _popcount64
    _matmul_numba = _pack_stream_numba = _unpack_stream_numba = None
    _pack_rows_numba = _xor_popcount_numba = None
    _bitlinear_round_numba = _adam_numba = None

IMPLEMENTATIONS = {
    "matmul": {"numpy": _matmul_numpy, "numba": _matmul_numba},
    "pack_stream": {"numpy": _pack_stream_numpy, "numba": _pack_stream_numba},
    "unpack_stream": {"numpy": _unpack_stream_numpy, "numba": _unpack_stream_numba},
    "pack_rows": {"numpy": _pack_rows_numpy, "numba": _pack_rows_numba},
    "xor_popcount": {"numpy": _xor_popcount_numpy, "numba": _xor_popcount_numba},
    "bitlinear_round": {"numpy": _bitlinear_round_numpy, "numba": _bitlinear_round_numba},
    "adam": {"numpy": _adam_numpy, "numba": _adam_numba},
}


def _select(name):
    return IMPLEMENTATIONS[name][BACKEND]


_matmul = _select("matmul")
_pack_stream = _select("pack_stream")
_unpack_stream = _select("unpack_stream")
_pack_rows = _select("pack_rows")
_xor_popcount = _select("xor_popcount")
_bitlinear_round = _select("bitlinear_round")
_adam = _select("adam")


def matmul_f32(a, b):
    """Ordered float32 product of contiguous 2-D arrays."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    return _matmul(a, b)


def pack_stream(values, bits):
    """Pack unsigned codes (< 2**bits) LSB-first into ``ceil(n*bits/8)`` bytes."""
    values = np.ascontiguousarray(values, dtype=np.uint32)
    return _pack_stream(values, int(bits))


def unpack_stream(payload, bits, count):
    payload = np.frombuffer(bytes(payload), dtype=np.uint8) if not isinstance(payload, np.ndarray) else payload
    return _unpack_stream(np.ascontiguousarray(payload, dtype=np.uint8), int(bits), int(count))


def pack_rows(bits):
    """Pack a boolean (rows, d) matrix into zero-padded uint64 words per row."""
    return _pack_rows(np.ascontiguousarray(bits, dtype=np.uint8))


def xor_popcount(x_words, w_words):
    """Hamming distances between every row of ``x_words`` and of ``w_words``."""
    return _xor_popcount(np.ascontiguousarray(x_words, dtype=np.uint64),
                         np.ascontiguousarray(w_words, dtype=np.uint64))


def bitlinear_round(w, mean, qmax, span):
    """Unclipped BitLinear codes for a float32 array (any shape)."""
    w = np.asarray(w, dtype=np.float32)
    flat = _bitlinear_round(np.ascontiguousarray(w).reshape(-1), float(mean), float(qmax), float(span))
    return flat.reshape(w.shape)


def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps, decay):
    """In-place Adam step on contiguous float32 arrays (any shape)."""
    f = np.float32
    _adam(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float32).reshape(-1),
          m.reshape(-1), v.reshape(-1), f(lr), f(b1), f(b2), f(c1), f(c2), f(eps), f(decay))
