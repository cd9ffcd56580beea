"""Dense linear algebra, seeded randomness, and information measures.

Matrices are plain 2-D ``float32`` numpy arrays. Probability vectors are 1-D
``float64`` arrays validated by :func:`check_prob_vector`; they are never
silently renormalised. Entropy and KL divergence are in nats.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import InfiniteDivergence, InvariantError, ParameterError, ShapeError

PROB_TOL = 1e-6


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvariantError(f"{name} contains non-finite values")
    return a


def matmul(a, b):
    """Matrix product with a fixed left-to-right float32 accumulation order.

    ``c[i, j]`` is accumulated over ``k = 0 .. n-1`` one term at a time, with no
    blocking or reassociation, so results are bit-reproducible.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    c = kernels.matmul_f32(a, b)
    if not np.all(np.isfinite(c)):
        raise InvariantError("matmul produced non-finite values")
    return c


def identity(n):
    return np.eye(n, dtype=np.float32)


# ---------------------------------------------------------------------------
# probability vectors
# ---------------------------------------------------------------------------


def check_prob_vector(p, name="probability vector"):
    """Return ``p`` as float64 after checking range and normalisation."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ParameterError(f"{name} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ParameterError(f"{name} has entries outside [0, 1]")
    total = float(p.sum())
    if abs(total - 1.0) > PROB_TOL:
        raise ParameterError(f"{name} sums to {total!r}, not 1")
    return p


def softmax_temp(logits, T=1.0):
    """Temperature softmax ``exp(g/T) / sum exp(g/T)`` with max subtraction."""
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    g = np.asarray(logits, dtype=np.float64)
    if g.ndim != 1 or not np.all(np.isfinite(g)):
        raise ParameterError("logits must be a finite 1-D vector")
    z = (g - g.max()) / T
    e = np.exp(z)
    return check_prob_vector(e / e.sum())


def softmax_rows(logits, T=1.0):
    """Row-wise temperature softmax of a 2-D array (float64, unchecked)."""
    g = np.asarray(logits, dtype=np.float64)
    z = (g - g.max(axis=-1, keepdims=True)) / T
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p):
    p = check_prob_vector(p)
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def kl_divergence(p, q):
    """KL(p || q) in nats; raises :class:`InfiniteDivergence` on support violation."""
    p = check_prob_vector(p, "p")
    q = check_prob_vector(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch: {p.size} vs {q.size}")
    mask = p > 0
    if np.any(q[mask] == 0):
        raise InfiniteDivergence("p has mass where q is zero")
    return float(max(0.0, np.sum(p[mask] * np.log(p[mask] / q[mask]))))


def top_k(values, k):
    """Indices of the ``k`` largest entries; ties go to the lower index."""
    values = np.asarray(values)
    order = np.lexsort((np.arange(values.size), -values))
    return order[:k]


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64 output for a given seed is identical on every platform numpy
    supports. One Rng has a single owner; use :meth:`spawn` to hand
    independent streams to other consumers.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @classmethod
    def _from_sequence(cls, seq):
        obj = cls.__new__(cls)
        obj.seed = int(seq.entropy) & 0xFFFFFFFFFFFFFFFF
        obj._seq = seq
        obj._gen = np.random.Generator(np.random.PCG64(seq))
        return obj

    def spawn(self, n):
        return [Rng._from_sequence(s) for s in self._seq.spawn(n)]

    def uniform(self, low, high, size):
        return self._gen.uniform(low, high, size).astype(np.float32)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size).astype(np.float32)

    def standard_normal(self, size=None):
        """float64 N(0, 1) draws."""
        return self._gen.standard_normal(size)

    def choice(self, n, size=None, p=None):
        return self._gen.choice(n, size=size, p=p)

    def random(self, size=None):
        return self._gen.random(size)

    def keep_mask(self, p_drop, size):
        """Boolean mask whose entries are True with probability ``1 - p_drop``."""
        return self._gen.random(size) >= p_drop

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def dirichlet(self, alpha):
        return self._gen.dirichlet(alpha)


def xavier_uniform(rng, fan_in, fan_out):
    """(fan_out, fan_in) weights drawn from U(-b, b), b = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_out, fan_in))
