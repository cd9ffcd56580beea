"""Mel spectrograms from PCM WAV files, and the binary embedding-table format.

Embedding files ("QMEB", little-endian)::

    magic   4s   b"QMEB"
    version u16  1
    rows    u32
    dim     u32  must be 1024
    flags   u8   bit 0: labels present
    labels  rows x u32        (only if flag bit 0)
    payload rows x dim x f32
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ParameterError, ShapeError, TruncatedError, VersionError

WINDOW = 2048
HOP = 512
MEL_BINS = 128
EMBED_DIM = 1024

EMB_MAGIC = b"QMEB"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sHIIB")


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ParameterError("frequency must be non-negative")
    m = 1125.0 * np.log1p(f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = 700.0 * np.expm1(m / 1125.0)
    return float(f) if f.ndim == 0 else f


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 1 or s.size == 0:
            raise DataError("an audio clip needs a non-empty mono signal")
        if np.max(np.abs(s)) > 1.0 + 1e-6:
            raise DataError("samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise DataError("sample rate must be positive")


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (frames, mel_bins), power
    sample_rate: int
    window: int = WINDOW
    hop: int = HOP

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def mel_bins(self):
        return self.values.shape[1]


def hann(n):
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(length, window=WINDOW, hop=HOP):
    return (length - window) // hop + 1


def stft_magnitude(clip, window=WINDOW, hop=HOP):
    """``(frames, window // 2 + 1)`` magnitudes of Hann-windowed frames."""
    if window & (window - 1):
        raise ParameterError("window must be a power of two")
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < window:
        raise DataError(f"clip has {x.size} samples, fewer than the {window}-sample window; "
                        "zero-pad it to at least one window")
    n = frame_count(x.size, window, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n]
    return np.abs(np.fft.rfft(frames * hann(window), axis=1))


def mel_filter_matrix(mel_bins, n_fft, sample_rate):
    """``(mel_bins, n_fft // 2 + 1)`` triangular filters with unit peaks.

    Peaks are equally spaced in mel between 0 and Nyquist (inclusive), with
    edge points one spacing beyond on either side.
    """
    if mel_bins < 2:
        raise ParameterError("need at least 2 mel bins")
    nyquist = sample_rate / 2.0
    top = hz_to_mel(nyquist)
    step = top / (mel_bins - 1)
    centers_mel = step * np.arange(-1, mel_bins + 1)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fmel = hz_to_mel(freqs)
    lower, center, upper = centers_mel[:-2, None], centers_mel[1:-1, None], centers_mel[2:, None]
    rise = (fmel - lower) / (center - lower)
    fall = (upper - fmel) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rise, fall))
    peaks = fb.max(axis=1, keepdims=True)
    if np.any(peaks == 0):
        raise ParameterError(f"{mel_bins} mel bins are too narrow for a {n_fft}-point FFT")
    # peaks rarely land on an FFT bin; rescale so every filter tops out at 1
    return fb / peaks


def filter_centers(mel_bins, sample_rate):
    """Peak frequencies in mel units."""
    return hz_to_mel(sample_rate / 2.0) / (mel_bins - 1) * np.arange(mel_bins)


def mel_filterbank(spec, mel_bins=MEL_BINS, sample_rate=22050):
    """Filter-weighted sums of squared magnitudes; ``spec`` is ``(frames, bins)``."""
    spec = np.asarray(spec, dtype=np.float64)
    n_fft = 2 * (spec.shape[1] - 1)
    fb = mel_filter_matrix(mel_bins, n_fft, sample_rate)
    return MelSpectrogram((spec ** 2) @ fb.T, sample_rate, n_fft)


def melspectrogram(clip, mel_bins=MEL_BINS, window=WINDOW, hop=HOP):
    mel = mel_filterbank(stft_magnitude(clip, window, hop), mel_bins, clip.sample_rate)
    return MelSpectrogram(mel.values, clip.sample_rate, window, hop)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def _chunks(data):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        if len(body) < size:
            raise TruncatedError(f"chunk {cid.decode(errors='replace')!r} is truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def load_wav(path):
    """PCM16 RIFF/WAVE as a mono :class:`AudioClip` (channels averaged)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    fmt = samples = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise TruncatedError("'fmt ' chunk is shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            samples = body
    if fmt is None:
        raise FormatError("missing 'fmt ' chunk")
    if samples is None:
        raise FormatError("missing 'data' chunk")
    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format != 1 or bits != 16:
        raise FormatError(f"unsupported encoding in 'fmt ' chunk: format {audio_format}, "
                          f"{bits} bits (only PCM 16-bit)")
    if channels < 1 or len(samples) % block_align:
        raise FormatError("'data' chunk length is not a whole number of frames")
    pcm = np.frombuffer(samples, dtype="<i2").reshape(-1, channels).astype(np.float64)
    return AudioClip(pcm.mean(axis=1) / 32768.0, rate)


def save_wav(path, clip):
    """Write a mono PCM16 file (samples clipped to the int16 range)."""
    pcm = np.clip(np.round(np.asarray(clip.samples) * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(body)) + b"WAVE")
        fh.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        fh.write(b"data" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# embedding tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    data: np.ndarray  # (rows, 1024) float32
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != EMBED_DIM:
            raise ShapeError(f"embeddings must be (rows, {EMBED_DIM}), got {self.data.shape}")
        if self.labels is not None and self.labels.shape != (self.data.shape[0],):
            raise ShapeError("need one label per row")

    @classmethod
    def create(cls, data, labels=None):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if labels is not None:
            labels = np.asarray(labels)
            if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
                raise ParameterError("labels must fit in u32")
            labels = labels.astype(np.int64)
        return cls(data, labels)

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def subset(self, idx):
        return EmbeddingTable(self.data[idx], None if self.labels is None else self.labels[idx])

    def to_bytes(self):
        flags = 1 if self.labels is not None else 0
        parts = [_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, self.rows, self.dim, flags)]
        if flags:
            parts.append(self.labels.astype("<u4").tobytes())
        parts.append(self.data.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw):
        if len(raw) < _EMB_HEADER.size:
            raise TruncatedError("embedding header is truncated")
        magic, version, rows, dim, flags = _EMB_HEADER.unpack_from(raw)
        if magic != EMB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}")
        if version != EMB_VERSION:
            raise VersionError(f"unsupported embedding format version {version}")
        if dim != EMBED_DIM:
            raise FormatError(f"embedding dim is {dim}, must be {EMBED_DIM}")
        pos = _EMB_HEADER.size
        labels = None
        need = pos + (4 * rows if flags & 1 else 0) + 4 * rows * dim
        if len(raw) < need:
            raise TruncatedError(f"embedding file has {len(raw)} bytes, needs {need}")
        if len(raw) > need:
            raise FormatError(f"{len(raw) - need} trailing bytes after payload")
        if flags & 1:
            labels = np.frombuffer(raw, "<u4", rows, pos).astype(np.int64)
            pos += 4 * rows
        data = np.frombuffer(raw, "<f4", rows * dim, pos).reshape(rows, dim).astype(np.float32)
        return cls(data, labels)


def atomic_write(path, payload):
    """Write bytes to ``path`` through a temp file in the same directory."""
    path = os.fspath(path)
    if not path:
        raise OSError("empty output path")
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_embeddings(table, path):
    atomic_write(path, table.to_bytes())


def load_embeddings(path):
    with open(path, "rb") as fh:
        return EmbeddingTable.from_bytes(fh.read())
