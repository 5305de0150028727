"""Framed acoustic features: constant-Q magnitudes, chroma, a YIN pitch
contour, temporal pooling and the stacked encoder input."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .render import AudioBuffer

KINDS = ("cqt", "chroma", "pitch", "stack")
C1_HZ = 440.0 * 2.0 ** ((24 - 69) / 12.0)  # 32.703 Hz
ENCODER_DIM = 12 + 84 + 1
HANN_ENBW = 1.5


class FeatureError(ValueError):
    pass


@dataclass(eq=False)
class FeatureSequence:
    kind: str
    frame_rate: float
    frames: np.ndarray
    fmin: float | None = None
    bins_per_octave: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FeatureError(f"unknown feature kind {self.kind!r}")
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        self.frames = f

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# constant-Q transform

_KERNEL_CACHE: dict = {}


def cqt_kernels(sample_rate, fmin=C1_HZ, bins_per_octave=12, n_bins=84):
    """Hann-windowed complex exponentials, one per bin, packed back to back.

    ``Q = 1 / (2**(1/bpo) - 1)`` is the ratio of centre frequency to
    equivalent noise bandwidth.  A Hann window of N samples has an ENBW of
    1.5 * sr / N, so bin k gets ``ceil(1.5 * Q * sr / f_k)`` samples.  Each
    kernel is divided by its window sum: a unit sinusoid at the bin centre
    gives magnitude 0.5.
    """
    key = (sample_rate, round(fmin, 9), bins_per_octave, n_bins)
    if key in _KERNEL_CACHE:
        return _KERNEL_CACHE[key]
    q = 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    freqs = fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)
    if freqs[-1] >= sample_rate / 2:
        raise FeatureError("highest CQT bin is above Nyquist")
    lengths = np.ceil(HANN_ENBW * q * sample_rate / freqs).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    kre = np.empty(lengths.sum())
    kim = np.empty(lengths.sum())
    for off, length, f in zip(offsets, lengths, freqs):
        n = np.arange(length)
        w = np.hanning(length + 2)[1:-1]
        w = w / w.sum()
        phase = 2.0 * np.pi * f * (n - length // 2) / sample_rate
        kre[off : off + length] = w * np.cos(phase)
        kim[off : off + length] = -w * np.sin(phase)
    packed = (kre, kim, offsets, lengths, freqs)
    _KERNEL_CACHE[key] = packed
    return packed


def cqt(buffer: AudioBuffer, fmin: float = C1_HZ, bins_per_octave: int = 12, n_bins: int = 84,
        hop: int = 512) -> FeatureSequence:
    """Magnitude CQT, frames centred on multiples of ``hop``."""
    kre, kim, offsets, lengths, _ = cqt_kernels(buffer.sample_rate, fmin, bins_per_octave, n_bins)
    if len(buffer) < lengths.max():
        raise FeatureError(
            f"buffer of {len(buffer)} samples is shorter than the lowest-bin window ({lengths.max()})"
        )
    n_frames = 1 + len(buffer) // hop
    mags = kernels.cqt_frames(buffer.samples, kre, kim, offsets, lengths, hop, n_frames)
    return FeatureSequence("cqt", buffer.sample_rate / hop, mags, fmin=fmin, bins_per_octave=bins_per_octave)


def chroma(cqt_features: FeatureSequence) -> FeatureSequence:
    """Fold CQT bin energies onto 12 pitch classes (index 0 = C), L1-normalised."""
    if cqt_features.kind != "cqt":
        raise FeatureError(f"chroma needs cqt features, got {cqt_features.kind!r}")
    bpo = cqt_features.bins_per_octave or 12
    if bpo != 12:
        raise FeatureError("chroma folding needs 12 bins per octave")
    fmin = cqt_features.fmin or C1_HZ
    base = int(round(12 * np.log2(fmin / 440.0) + 69)) % 12
    energy = cqt_features.frames ** 2
    out = np.zeros((energy.shape[0], 12))
    for b in range(energy.shape[1]):
        out[:, (base + b) % 12] += energy[:, b]
    total = out.sum(axis=1, keepdims=True)
    active = total[:, 0] > 1e-20
    out[active] /= total[active]
    out[~active] = 0.0
    return FeatureSequence("chroma", cqt_features.frame_rate, out)


# ---------------------------------------------------------------------------
# pitch


def _frame_signal(x, frame, hop):
    n_frames = 1 + len(x) // hop
    pad = frame // 2
    xp = np.concatenate([np.zeros(pad), x, np.zeros(frame)])
    idx = np.arange(n_frames) * hop
    return np.lib.stride_tricks.sliding_window_view(xp, frame)[idx]


def cumulative_mean_normalized(diff: np.ndarray) -> np.ndarray:
    """d'(0) = 1, d'(tau) = d(tau) * tau / sum_{j<=tau} d(j); 1 where undefined."""
    out = np.ones_like(diff)
    csum = np.cumsum(diff[:, 1:], axis=1)
    taus = np.arange(1, diff.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = diff[:, 1:] * taus / csum
    out[:, 1:] = np.where(csum > 1e-12, vals, 1.0)
    return out


def _pick_period(cmnd_row, min_lag, max_lag, threshold):
    tau = min_lag
    while tau < max_lag:
        if cmnd_row[tau] < threshold:
            while tau + 1 < max_lag and cmnd_row[tau + 1] < cmnd_row[tau]:
                tau += 1
            if 0 < tau < len(cmnd_row) - 1:
                a, b, c = cmnd_row[tau - 1], cmnd_row[tau], cmnd_row[tau + 1]
                denom = a - 2 * b + c
                if denom > 0:
                    return tau + 0.5 * (a - c) / denom
            return float(tau)
        tau += 1
    return 0.0


def median_smooth(x: np.ndarray, width: int = 5) -> np.ndarray:
    if width <= 1 or len(x) == 0:
        return x.copy()
    half = width // 2
    xp = np.concatenate([np.repeat(x[:1], half), x, np.repeat(x[-1:], half)])
    return np.median(np.lib.stride_tricks.sliding_window_view(xp, width), axis=1)


def pitch_contour(buffer: AudioBuffer, frame: int = 2048, hop: int = 512,
                  f_range: tuple[float, float] = (55.0, 1760.0), threshold: float = 0.15,
                  smooth: int = 5) -> FeatureSequence:
    """YIN f0 per frame in Hz; 0 marks unvoiced frames.

    Each frame takes the first lag whose cumulative-mean-normalised
    difference falls below ``threshold``, slides to the bottom of that dip and
    refines it with a parabola.  A ``smooth``-frame median filter follows.
    """
    sr = buffer.sample_rate
    fmin, fmax = f_range
    max_lag = int(np.ceil(sr / fmin))
    min_lag = max(2, int(np.floor(sr / fmax)))
    if max_lag >= frame:
        raise FeatureError("frame too short for the lowest searched frequency")
    if len(buffer) == 0:
        raise FeatureError("empty buffer")
    frames = np.ascontiguousarray(_frame_signal(buffer.samples, frame, hop))
    diff = kernels.yin_difference(frames, max_lag)
    cmnd = cumulative_mean_normalized(diff)
    f0 = np.zeros(len(frames))
    for i in range(len(frames)):
        period = _pick_period(cmnd[i], min_lag, max_lag, threshold)
        if period > 0:
            f0[i] = sr / period
    f0 = median_smooth(f0, smooth)
    return FeatureSequence("pitch", sr / hop, f0)


# ---------------------------------------------------------------------------
# pooling and the encoder input


def pool_frames(seq: FeatureSequence, size: int = 10, stride: int = 10) -> FeatureSequence:
    """Moving-window mean; the trailing partial window averages what it has."""
    if size < 1 or stride < 1:
        raise FeatureError("size and stride must be >= 1")
    f = seq.frames
    n = len(f)
    if n == 0:
        return FeatureSequence(seq.kind, seq.frame_rate / stride, np.zeros((0, seq.dim)), seq.fmin, seq.bins_per_octave)
    if size == 1:
        return FeatureSequence(seq.kind, seq.frame_rate / stride, f[::stride].copy(), seq.fmin, seq.bins_per_octave)
    starts = np.arange(0, n, stride)
    csum = np.concatenate([np.zeros((1, f.shape[1])), np.cumsum(f, axis=0)])
    stops = np.minimum(starts + size, n)
    pooled = (csum[stops] - csum[starts]) / (stops - starts)[:, None]
    return FeatureSequence(seq.kind, seq.frame_rate / stride, pooled, seq.fmin, seq.bins_per_octave)


def stack_features(cqt_seq: FeatureSequence, chroma_seq: FeatureSequence, pitch_seq: FeatureSequence,
                   pool: int = 10) -> FeatureSequence:
    """Pool each stream and concatenate [chroma | log-CQT | log-f0] (dim 97).

    CQT magnitudes are compressed with ``log1p(100 x)``; voiced f0 becomes
    octaves above 55 Hz and unvoiced stays 0.
    """
    n = min(len(cqt_seq), len(chroma_seq), len(pitch_seq))
    c = pool_frames(FeatureSequence("chroma", chroma_seq.frame_rate, chroma_seq.frames[:n]), pool, pool)
    q = pool_frames(FeatureSequence("cqt", cqt_seq.frame_rate, cqt_seq.frames[:n]), pool, pool)
    f0 = pitch_seq.frames[:n, 0]
    octaves = np.where(f0 > 0, np.log2(np.maximum(f0, 1e-9) / 55.0), 0.0)
    p = pool_frames(FeatureSequence("pitch", pitch_seq.frame_rate, octaves), pool, pool)
    frames = np.concatenate([c.frames, np.log1p(100.0 * q.frames), p.frames], axis=1)
    return FeatureSequence("stack", c.frame_rate, frames)


def transpose_stack(frames: np.ndarray, semitones: int) -> np.ndarray:
    """Shift stacked encoder frames by whole semitones.

    Chroma rotates, CQT bins move with silence (0) filling the vacated
    bins and voiced log-f0 moves by ``semitones / 12`` octaves.
    """
    frames = np.asarray(frames, dtype=np.float64)
    k = int(semitones)
    if k == 0:
        return frames.copy()
    out = np.empty_like(frames)
    out[:, :12] = np.roll(frames[:, :12], k, axis=1)
    q = frames[:, 12:96]
    out[:, 12:96] = 0.0
    if k > 0:
        out[:, 12 + k : 96] = q[:, : 84 - k]
    else:
        out[:, 12 : 96 + k] = q[:, -k:]
    f0 = frames[:, 96]
    out[:, 96] = np.where(f0 > 0, f0 + k / 12.0, 0.0)
    return out


def stretch_stack(frames: np.ndarray, factor: float) -> np.ndarray:
    """Play stacked encoder frames ``factor`` times faster about the centre
    frame, keeping the frame count.

    Spectral columns are linearly interpolated; log-f0 takes the nearest
    frame so voicing stays binary.  Frames past either end repeat the edge.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if factor <= 0:
        raise ValueError("factor must be positive")
    n = len(frames)
    if factor == 1.0 or n < 2:
        return frames.copy()
    c = (n - 1) / 2.0
    pos = np.clip(c + (np.arange(n) - c) * factor, 0.0, n - 1.0)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    w = (pos - lo)[:, None]
    out = (1.0 - w) * frames[lo] + w * frames[lo + 1]
    out[:, 96] = frames[np.rint(pos).astype(int), 96]
    return out


def encoder_features(buffer: AudioBuffer, pool: int = 10) -> FeatureSequence:
    q = cqt(buffer)
    return stack_features(q, chroma(q), pitch_contour(buffer), pool)


# ---------------------------------------------------------------------------
# binary cache container

_MAGIC = b"MSFQ"
_VERSION = 1
_HEADER = struct.Struct("<4sBBIId")


def dump_features(seq: FeatureSequence) -> bytes:
    """magic, version, kind, n_frames, dim, frame_rate, float32 LE rows, crc32."""
    payload = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
    head = _HEADER.pack(_MAGIC, _VERSION, KINDS.index(seq.kind), len(seq), seq.dim, float(seq.frame_rate))
    return head + payload + struct.pack("<I", zlib.crc32(head + payload))


def load_features(data: bytes) -> FeatureSequence:
    if len(data) < _HEADER.size + 4:
        raise FeatureError("feature file truncated")
    magic, version, kind, n, dim, rate = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != _VERSION or kind >= len(KINDS):
        raise FeatureError("not a feature file")
    end = _HEADER.size + 4 * n * dim
    if len(data) != end + 4:
        raise FeatureError("feature file has the wrong length")
    (crc,) = struct.unpack_from("<I", data, end)
    if crc != zlib.crc32(data[:end]):
        raise FeatureError("feature file checksum mismatch")
    frames = np.frombuffer(data, dtype="<f4", count=n * dim, offset=_HEADER.size).reshape(n, dim)
    return FeatureSequence(KINDS[kind], rate, frames.astype(np.float64))
