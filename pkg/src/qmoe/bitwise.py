"""Binary vectors and the XOR-popcount linear primitive.

A bit set to 1 encodes +1 (value above threshold), a cleared bit encodes -1.
``popcount_linear`` returns ``popcount(x ^ w) - d/2``: identical vectors give
the minimum ``-d/2`` and the result always equals ``-dot(sx, sw) / 2`` for the
+/-1 decodings ``sx`` and ``sw``. The sign is kept as written; layers built on
top absorb it through their bias and the following float layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError

DEFAULT_THRESHOLD = 0.05


@dataclass(frozen=True)
class BitVector:
    length: int
    payload: bytes

    def __post_init__(self):
        nbytes = (self.length + 7) // 8
        if len(self.payload) != nbytes:
            raise ShapeError(f"{self.length} bits need {nbytes} bytes, got {len(self.payload)}")
        rem = self.length % 8
        if rem and self.payload[-1] >> rem:
            raise ShapeError("pad bits beyond length must be zero")

    @classmethod
    def from_bits(cls, bits):
        bits = np.asarray(bits, dtype=bool).reshape(-1)
        return cls(bits.size, np.packbits(bits, bitorder="little").tobytes())

    def bits(self):
        raw = np.unpackbits(np.frombuffer(self.payload, np.uint8), bitorder="little")
        return raw[: self.length].astype(bool)

    def signs(self):
        """The +/-1 decoding (bit 1 -> +1)."""
        return np.where(self.bits(), 1, -1).astype(np.int64)

    def complement(self):
        return BitVector.from_bits(~self.bits())

    def __len__(self):
        return self.length


def binarize(x, tau=DEFAULT_THRESHOLD):
    """Bit i is set iff ``x[i] > tau`` (strict)."""
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ShapeError("binarize input must be finite")
    return BitVector.from_bits(x > np.float32(tau))


def _masked_xor(a, b):
    xa = np.frombuffer(a.payload, np.uint8)
    xb = np.frombuffer(b.payload, np.uint8)
    x = xa ^ xb
    rem = a.length % 8
    if rem:
        x = x.copy()
        x[-1] &= (1 << rem) - 1
    return x


def popcount_linear(x_b, w_b):
    """``popcount(x_b XOR w_b) - d/2`` as a float (d may be odd)."""
    if x_b.length != w_b.length:
        raise ShapeError(f"bit-vector lengths differ: {x_b.length} vs {w_b.length}")
    hamming = int(np.bitwise_count(_masked_xor(x_b, w_b)).sum())
    return hamming - x_b.length / 2.0


def bitwise_affine(x_b, rows, bias):
    """``popcount_linear(x_b, rows[j]) + bias[j]`` for every row."""
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if len(rows) != bias.size:
        raise ShapeError(f"{len(rows)} rows but {bias.size} biases")
    out = np.empty(len(rows), dtype=np.float64)
    for j, row in enumerate(rows):
        if row.length != x_b.length:
            raise ShapeError(f"row {j} has length {row.length}, input has {x_b.length}")
        out[j] = popcount_linear(x_b, row) + bias[j]
    return out


# ---------------------------------------------------------------------------
# batched path used by networks
# ---------------------------------------------------------------------------


def pack_sign_rows(signs):
    """Pack a (rows, d) +/-1 (or boolean) matrix into uint64 words, bit 1 <=> +1."""
    return kernels.pack_rows(np.asarray(signs) > 0)


def binarize_rows(X, tau=DEFAULT_THRESHOLD):
    X = np.asarray(X, dtype=np.float32)
    return kernels.pack_rows(X > np.float32(tau))


def bitwise_linear(x_words, w_words, d, bias=None):
    """Batched ``popcount(x ^ w) - d/2 (+ bias)`` as float32, shape (batch, rows)."""
    if x_words.shape[1] != w_words.shape[1]:
        raise ShapeError(f"word counts differ: {x_words.shape[1]} vs {w_words.shape[1]}")
    y = kernels.xor_popcount(x_words, w_words).astype(np.float64) - d / 2.0
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y.astype(np.float32)


def popcount_words(n_in, n_out):
    """64-bit popcount operations for one (n_out x n_in) bitwise layer evaluation."""
    return -(-n_in // 64) * n_out
