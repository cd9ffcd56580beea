"""The "CQMF" binary model container.

All integers and floats are little-endian::

    header   magic "CQMF" | version u16 | kind u8 (0 expert, 1 moe) | experts u16
    moe      k u16 | T f64 | alpha_curiosity f64 | alpha_balance f64 | mc_samples u16
             | kl_mode u8 (0 class, 1 gate) | entropy_threshold f64 (NaN = off)   [moe only]
    net      scheme tag of layer 0 u8 | layers u16 | dropout_p f32 | act_quant u8
             | n_dropout u16 | dropout_after u16 * n_dropout | layer * layers
    layer    tag u8 | bits u8 | in u32 | out u32 | n_scale u32 | scale f32 * n_scale
             | mu f32 | tau f32 | has_bias u8 | bias f32 * out | payload_len u64 | payload
    router   net block (moe only, float32 layers)
    trailer  CRC32 of every preceding byte, u32

An expert container holds one net block; a MoE container holds one per expert
and then the router.
"""

from __future__ import annotations

import math
import struct
import zlib

import numpy as np

from .audio import atomic_write
from .errors import ChecksumError, FormatError, TruncatedError, VersionError
from .experts import ExpertNet, Layer
from .quantizers import PackedWeights, QuantizedLayer, QuantScheme
from .router import MoEModel, RouterNet

MAGIC = b"CQMF"
VERSION = 1
KIND_EXPERT = 0
KIND_MOE = 1
_HEADER = struct.Struct("<4sHBH")
_MOE = struct.Struct("<HdddHBd")
_NET = struct.Struct("<BHfBH")
_LAYER = struct.Struct("<BBIII")
_KL_MODES = ("class", "gate")


class _Reader:
    def __init__(self, raw, end):
        self.raw = raw
        self.pos = 0
        self.end = end

    def take(self, n):
        if self.pos + n > self.end:
            raise TruncatedError(f"container ends at byte {self.end}, needed {self.pos + n}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def array(self, dtype, count):
        return np.frombuffer(self.take(np.dtype(dtype).itemsize * count), dtype=dtype).copy()


def _f32(x):
    return np.asarray(x, dtype="<f4").tobytes()


def _encode_layer(q):
    scales = np.asarray(q.weight_scale, dtype=np.float32).reshape(-1)
    parts = [_LAYER.pack(q.scheme.tag, q.scheme.bits if q.scheme.kind != "float32" else 32,
                         q.in_dim, q.out_dim, scales.size),
             _f32(scales), _f32([q.weight_mean, q.threshold])]
    if q.bias is None:
        parts.append(b"\x00")
    else:
        parts += [b"\x01", _f32(q.bias)]
    parts += [struct.pack("<Q", q.packed.nbytes), q.packed.payload]
    return b"".join(parts)


def _decode_layer(r):
    tag, bits, in_dim, out_dim, n_scale = r.unpack(_LAYER)
    try:
        scheme = QuantScheme.from_tag(tag, bits)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    scales = r.array("<f4", n_scale).astype(np.float32)
    mu, tau = r.array("<f4", 2)
    has_bias = r.take(1)[0]
    bias = r.array("<f4", out_dim).astype(np.float32) if has_bias else None
    (plen,) = struct.unpack("<Q", r.take(8))
    payload = r.take(plen)
    code_bits = 32 if scheme.kind == "float32" else scheme.bits
    packed = PackedWeights(code_bits, payload, in_dim * out_dim)
    return QuantizedLayer(in_dim, out_dim, scheme, packed, scales, float(mu), float(tau), bias)


def _encode_net(net):
    tag = net.layers[0].scheme.tag
    drop = list(net.dropout_after)
    parts = [_NET.pack(tag, len(net.layers), net.dropout_p, int(net.act_quant), len(drop)),
             struct.pack(f"<{len(drop)}H", *drop)]
    parts += [_encode_layer(q) for q in net.quantized_layers()]
    return b"".join(parts)


def _decode_net(r, cls=ExpertNet):
    _tag, n_layers, dropout_p, act_quant, n_drop = r.unpack(_NET)
    drop = struct.unpack(f"<{n_drop}H", r.take(2 * n_drop))
    layers = [Layer.from_quantized(_decode_layer(r)) for _ in range(n_layers)]
    return cls(layers, float(np.float32(dropout_p)), drop, bool(act_quant))


def to_bytes(model):
    """Serialise an :class:`ExpertNet` or :class:`MoEModel`."""
    if isinstance(model, MoEModel):
        parts = [_HEADER.pack(MAGIC, VERSION, KIND_MOE, model.num_experts)]
        thr = math.nan if model.entropy_threshold is None else model.entropy_threshold
        parts.append(_MOE.pack(model.k, model.T, model.alpha_curiosity, model.alpha_balance,
                               model.mc_samples, _KL_MODES.index(model.kl_mode), thr))
        parts += [_encode_net(e) for e in model.experts]
        parts.append(_encode_net(model.router))
    else:
        parts = [_HEADER.pack(MAGIC, VERSION, KIND_EXPERT, 1), _encode_net(model)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _parse(raw, end):
    r = _Reader(raw, end)
    _, _, kind, count = r.unpack(_HEADER)
    if kind == KIND_EXPERT:
        model = _decode_net(r)
    elif kind == KIND_MOE:
        k, T, a_c, a_b, mc, kl_mode, thr = r.unpack(_MOE)
        if kl_mode >= len(_KL_MODES):
            raise FormatError(f"unknown kl mode {kl_mode}")
        experts = [_decode_net(r) for _ in range(count)]
        router = _decode_net(r, RouterNet)
        model = MoEModel(experts, router, k=k, T=T, alpha_curiosity=a_c, alpha_balance=a_b,
                         mc_samples=mc, kl_mode=_KL_MODES[kl_mode],
                         entropy_threshold=None if math.isnan(thr) else thr)
    else:
        raise FormatError(f"unknown model kind {kind}")
    return model, r.pos


def from_bytes(raw):
    raw = bytes(raw)
    if len(raw) < _HEADER.size + 4:
        raise TruncatedError(f"container is only {len(raw)} bytes")
    magic, version, _, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored:
        # tell a short file apart from a corrupted one
        try:
            _, used = _parse(raw, len(raw))
        except TruncatedError:
            raise
        except Exception:
            used = None
        if used is not None and used + 4 > len(raw):
            raise TruncatedError("container is truncated")
        raise ChecksumError("CRC32 mismatch; refusing to load")
    model, used = _parse(raw, len(raw) - 4)
    if used != len(raw) - 4:
        raise FormatError(f"{len(raw) - 4 - used} unexpected bytes before the checksum")
    return model


def save_model(model, path):
    atomic_write(path, to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
