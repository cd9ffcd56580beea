"""Weight/activation quantizers, bit packing, and model-size accounting.

Conventions fixed here and relied on everywhere else:

* rounding is half-away-from-zero;
* BitLinear codes for ``k >= 2`` are stored offset-binary (``code + 2**(k-1)``),
  sign codes (``k = 1``) and binary codes store ``+1`` as bit 1 and ``-1`` as 0,
  ternary codes use 2 bits offset by 2;
* the packed bit stream is LSB-first within each byte, codes in row-major order;
* scales, means, thresholds and biases are float32 and are counted in sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import IntegrityError, ParameterError, ShapeError

BITLINEAR_BITS = (1, 2, 4, 8, 16)
ZERO_SCALE = 1e-8
HEADER_BYTES = 16


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantScheme:
    kind: str  # "float32" | "bitlinear" | "ternary" | "bitwise"
    bits: int = 32

    def __post_init__(self):
        if self.kind == "bitlinear" and self.bits not in BITLINEAR_BITS:
            raise ParameterError(f"BitLinear bits must be one of {BITLINEAR_BITS}, got {self.bits}")
        if self.kind not in ("float32", "bitlinear", "ternary", "bitwise"):
            raise ParameterError(f"unknown quantization kind {self.kind!r}")

    @classmethod
    def float32(cls):
        return cls("float32", 32)

    @classmethod
    def bitlinear(cls, k):
        return cls("bitlinear", int(k))

    @classmethod
    def ternary(cls):
        return cls("ternary", 2)

    @classmethod
    def bitwise(cls):
        return cls("bitwise", 1)

    @classmethod
    def parse(cls, text):
        """Accepts ``fp32``/``float32``, ``q4``/``bitlinear4``, ``ternary``/``bitnet``, ``bitwise``/``ptq``."""
        t = str(text).strip().lower()
        if t in ("fp32", "float32", "float"):
            return cls.float32()
        if t in ("ternary", "bitnet"):
            return cls.ternary()
        if t in ("bitwise", "ptq", "binary"):
            return cls.bitwise()
        for prefix in ("bitlinear", "q"):
            if t.startswith(prefix) and t[len(prefix):].isdigit():
                return cls.bitlinear(int(t[len(prefix):]))
        raise ParameterError(f"cannot parse quantization scheme {text!r}")

    @property
    def code_bits(self):
        return self.bits

    @property
    def tag(self):
        return {"float32": 0, "bitlinear": 1, "ternary": 2, "bitwise": 3}[self.kind]

    @classmethod
    def from_tag(cls, tag, bits):
        kind = {0: "float32", 1: "bitlinear", 2: "ternary", 3: "bitwise"}.get(tag)
        if kind is None:
            raise ParameterError(f"unknown scheme tag {tag}")
        return cls(kind, bits)

    def __str__(self):
        if self.kind == "bitlinear":
            return f"bitlinear{self.bits}"
        return self.kind


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------


def code_range(bits):
    """Legal signed code range for a storage width."""
    if bits == 1:
        return -1, 1
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def _encode(codes, bits):
    codes = np.asarray(codes).reshape(-1).astype(np.int64)
    lo, hi = code_range(bits)
    if bits == 1:
        if np.any((codes != 1) & (codes != -1)):
            raise ParameterError("1-bit codes must be -1 or +1")
        return (codes > 0).astype(np.uint32)
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise ParameterError(f"codes outside [{lo}, {hi}] for {bits}-bit packing")
    return (codes + (1 << (bits - 1))).astype(np.uint32)


def _decode(stored, bits):
    stored = stored.astype(np.int64)
    if bits == 1:
        return np.where(stored > 0, 1, -1).astype(np.int32)
    return (stored - (1 << (bits - 1))).astype(np.int32)


@dataclass(frozen=True)
class PackedWeights:
    bits_per_code: int
    payload: bytes
    code_count: int

    def __post_init__(self):
        expected = (self.code_count * self.bits_per_code + 7) // 8
        if len(self.payload) != expected:
            raise IntegrityError(
                f"payload is {len(self.payload)} bytes, expected {expected} "
                f"for {self.code_count} codes at {self.bits_per_code} bits")

    @classmethod
    def pack(cls, codes, bits):
        codes = np.asarray(codes)
        if bits == 32:
            data = np.ascontiguousarray(codes, dtype="<f4").reshape(-1)
            return cls(32, data.tobytes(), data.size)
        stored = _encode(codes, bits)
        return cls(bits, kernels.pack_stream(stored, bits).tobytes(), stored.size)

    def unpack(self):
        """Signed integer codes (or float32 values for 32-bit payloads), flat."""
        if self.bits_per_code == 32:
            return np.frombuffer(self.payload, dtype="<f4").astype(np.float32)
        stored = kernels.unpack_stream(np.frombuffer(self.payload, dtype=np.uint8),
                                       self.bits_per_code, self.code_count)
        return _decode(stored, self.bits_per_code)

    @property
    def nbytes(self):
        return len(self.payload)


def pack(codes, bits):
    return PackedWeights.pack(codes, bits)


def unpack(packed):
    return packed.unpack()


# ---------------------------------------------------------------------------
# quantizers
# ---------------------------------------------------------------------------


def _finite(W, name="W"):
    W = np.asarray(W, dtype=np.float32)
    if not np.all(np.isfinite(W)):
        raise ParameterError(f"{name} contains non-finite values")
    return W


def bitlinear_unclipped(W, k):
    """``(round((W - mu) / s), s, mu)`` before clipping; see :func:`quantize_bitlinear`."""
    if k not in (2, 4, 8, 16):
        raise ParameterError(f"quantize_bitlinear needs k in {{2, 4, 8, 16}}, got {k}")
    W = _finite(W)
    qmax = (1 << (k - 1)) - 1
    mean = float(np.mean(W, dtype=np.float64)) if W.size else 0.0
    mu = float(np.float32(mean))
    span = max(float(W.max()) - mean, mean - float(W.min())) if W.size else 0.0
    if span == 0.0:
        return np.zeros(W.shape, dtype=np.int64), ZERO_SCALE, mu
    # (W - mu) * qmax / span keeps exact halves exact where (W - mu) / s would not
    raw = kernels.bitlinear_round(W, mean, qmax, span)
    return raw, float(np.float32(span / qmax)), mu


def quantize_bitlinear(W, k):
    """Symmetric k-bit codes around the mean.

    Returns ``(codes, s, mu)`` with ``mu = mean(W)``,
    ``s = max|W - mu| / (2**(k-1) - 1)`` and
    ``codes = clip(round((W - mu) / s), -2**(k-1), 2**(k-1) - 1)``.
    An all-constant ``W`` gives ``s = 1e-8`` and zero codes.
    """
    raw, s, mu = bitlinear_unclipped(W, k)
    qmax = (1 << (k - 1)) - 1
    return np.clip(raw, -qmax - 1, qmax).astype(np.int32), s, mu


def quantize_sign(W):
    """1-bit codes ``sign(W)`` (zero maps to +1) with scale ``mean|W|``."""
    W = _finite(W)
    codes = np.where(W >= 0, 1, -1).astype(np.int32)
    s = float(np.float32(np.mean(np.abs(W), dtype=np.float64))) if W.size else 0.0
    return codes, s


def quantize_ternary(W, tau):
    """``sign(w) * 1(|w| > tau)`` elementwise."""
    if not tau >= 0:
        raise ParameterError(f"ternary threshold must be >= 0, got {tau}")
    W = _finite(W)
    return (np.sign(W) * (np.abs(W) > np.float32(tau))).astype(np.int32)


def ternary_channel_scales(W, codes):
    """Per-output-row mean |w| over surviving weights; the L2-optimal alpha for fixed codes."""
    W = np.asarray(W, dtype=np.float64)
    nz = codes != 0
    counts = nz.sum(axis=1)
    sums = np.where(nz, np.abs(W), 0.0).sum(axis=1)
    alpha = np.where(counts > 0, sums / np.maximum(counts, 1), ZERO_SCALE)
    return np.maximum(alpha, ZERO_SCALE).astype(np.float32)


def quantize_activations(x):
    """int8-range codes with ``s_x = 127 / max|x|``; rows are scaled independently for 2-D input."""
    x = _finite(x, "x")
    m = np.max(np.abs(x), axis=-1, keepdims=True).astype(np.float64) if x.size else np.zeros(1)
    s = np.where(m > 0, 127.0 / np.where(m > 0, m, 1.0), 1.0)
    codes = np.clip(round_half_away(x.astype(np.float64) * s), -127, 127).astype(np.int32)
    if x.ndim == 1:
        return codes, float(s[0])
    return codes, s[..., 0]


# ---------------------------------------------------------------------------
# quantized layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    in_dim: int
    out_dim: int
    scheme: QuantScheme
    packed: PackedWeights
    weight_scale: np.ndarray = field(default_factory=lambda: np.ones(1, np.float32))
    weight_mean: float = 0.0
    threshold: float = 0.0
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.packed.code_count != self.in_dim * self.out_dim:
            raise IntegrityError(
                f"{self.packed.code_count} codes for a {self.out_dim}x{self.in_dim} layer")
        if self.bias is not None and np.asarray(self.bias).shape != (self.out_dim,):
            raise ShapeError(f"bias must have length {self.out_dim}")

    def codes(self):
        return self.packed.unpack().reshape(self.out_dim, self.in_dim)

    @property
    def param_count(self):
        return self.in_dim * self.out_dim + (0 if self.bias is None else self.out_dim)

    def bias_or_zero(self):
        if self.bias is None:
            return np.zeros(self.out_dim, dtype=np.float32)
        return np.asarray(self.bias, dtype=np.float32)


def quantize_layer(W, bias, scheme, *, tau=None, alpha=None):
    """Build a :class:`QuantizedLayer` from float weights of shape (out, in).

    ``tau`` is the ternary threshold or the bitwise input threshold.
    ``alpha`` overrides the per-row ternary scales (trained values).
    """
    W = _finite(W)
    if W.ndim != 2:
        raise ShapeError(f"layer weights must be 2-D, got {W.shape}")
    out_dim, in_dim = W.shape
    bias = None if bias is None else np.asarray(bias, dtype=np.float32).copy()
    kind = scheme.kind
    if kind == "float32":
        return QuantizedLayer(in_dim, out_dim, scheme, PackedWeights.pack(W, 32), bias=bias)
    if kind == "bitlinear":
        if scheme.bits == 1:
            codes, s = quantize_sign(W)
            mu = 0.0
        else:
            codes, s, mu = quantize_bitlinear(W, scheme.bits)
        return QuantizedLayer(in_dim, out_dim, scheme, PackedWeights.pack(codes, scheme.bits),
                              np.array([s], np.float32), float(mu), 0.0, bias)
    if kind == "ternary":
        tau = 0.0 if tau is None else float(tau)
        codes = quantize_ternary(W, tau)
        if alpha is None:
            alpha = ternary_channel_scales(W, codes)
        alpha = np.asarray(alpha, dtype=np.float32).reshape(out_dim)
        return QuantizedLayer(in_dim, out_dim, scheme, PackedWeights.pack(codes, 2),
                              alpha.copy(), 0.0, float(np.float32(tau)), bias)
    # bitwise: weight bit 1 <=> w > 0; tau is the activation binarization threshold
    codes = np.where(W > 0, 1, -1).astype(np.int32)
    tau = 0.05 if tau is None else float(tau)
    return QuantizedLayer(in_dim, out_dim, scheme, PackedWeights.pack(codes, 1),
                          np.ones(1, np.float32), 0.0, float(np.float32(tau)), bias)


def dequantize(layer):
    """Float32 (out, in) weights represented by ``layer``.

    BitLinear: ``codes * s + mu``; ternary: row i is ``codes[i] * alpha[i]``;
    bitwise: the +/-1 sign matrix.
    """
    codes = layer.codes()
    kind = layer.scheme.kind
    if kind == "float32":
        W = codes.astype(np.float32)
    elif kind == "bitlinear":
        s = np.float32(layer.weight_scale[0])
        W = codes.astype(np.float32) * s + np.float32(layer.weight_mean)
    elif kind == "ternary":
        W = codes.astype(np.float32) * np.asarray(layer.weight_scale, np.float32)[:, None]
    else:
        W = codes.astype(np.float32)
    if not np.all(np.isfinite(W)):
        raise IntegrityError("dequantized weights are not finite")
    return W


# ---------------------------------------------------------------------------
# sizes
# ---------------------------------------------------------------------------


def layer_size_bytes(layer):
    kind = layer.scheme.kind
    extra = 0
    if kind == "bitlinear":
        extra = 4 + (4 if layer.scheme.bits >= 2 else 0)  # s, and mu for k >= 2
    elif kind == "ternary":
        extra = 4 * layer.out_dim + 4  # alpha_i and tau
    elif kind == "bitwise":
        extra = 4  # tau
    bias = 0 if layer.bias is None else 4 * layer.out_dim
    return layer.packed.nbytes + extra + bias


@dataclass
class SizeReport:
    layers: list
    total_bytes: int
    param_count: int
    fp32_bytes: int
    reduction: float

    def to_dict(self):
        return {
            "layers": self.layers,
            "total_bytes": self.total_bytes,
            "param_count": self.param_count,
            "fp32_bytes": self.fp32_bytes,
            "reduction": self.reduction,
        }


def model_size_report(layers, baseline_bits=32, header_bytes=HEADER_BYTES):
    """Serialized size of ``layers`` versus an all-float baseline."""
    rows = []
    total = header_bytes
    params = 0
    for i, layer in enumerate(layers):
        b = layer_size_bytes(layer)
        rows.append({"index": i, "scheme": str(layer.scheme), "in_dim": layer.in_dim,
                     "out_dim": layer.out_dim, "params": layer.param_count, "bytes": b})
        total += b
        params += layer.param_count
    baseline = math.ceil(params * baseline_bits / 8)
    return SizeReport(rows, total, params, baseline, baseline / total if total else 0.0)
