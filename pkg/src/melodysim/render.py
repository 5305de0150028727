"""Additive synthesis of MIDI pieces, audio-level augmentations and
fixed-window segmentation."""
from __future__ import annotations

import os
import wave
import zlib
from fractions import Fraction
from dataclasses import dataclass

import numpy as np
from scipy import signal

from . import kernels
from .instruments import ENSEMBLES, EnsembleTable, default_table
from .midi import MidiPiece, ticks_to_seconds

DEFAULT_SR = 22050
ATTACK_S = 0.010
RELEASE_S = 0.050
PEAK = 0.9
WSOLA_WINDOW = 1024
WSOLA_HOP = 256
WSOLA_TOLERANCE = 256

# relative amplitudes of harmonics 1..4 per ensemble
PARTIALS = {
    "pianos": (1.0, 0.45, 0.20, 0.10),
    "guitars": (1.0, 0.70, 0.35, 0.25),
    "strings_high": (1.0, 0.60, 0.50, 0.35),
    "strings_low": (1.0, 0.80, 0.50, 0.30),
    "winds": (1.0, 0.15, 0.40, 0.05),
    "brass": (1.0, 0.85, 0.70, 0.50),
    "organs": (1.0, 1.00, 0.50, 0.50),
    "synth_leads": (1.0, 0.50, 0.33, 0.25),
    "synth_pads": (1.0, 0.30, 0.10, 0.05),
    "basses": (1.0, 0.40, 0.15, 0.05),
    "mallets": (1.0, 0.05, 0.25, 0.02),
    "other": (1.0, 0.25, 0.25, 0.25),
}
assert set(PARTIALS) == set(ENSEMBLES)


@dataclass(eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(eq=False)
class AudioSegment:
    track_id: str
    version_id: str
    segment_index: int
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR
    window_seconds: float = 10.0

    @property
    def relpath(self) -> str:
        return segment_relpath(self.track_id, self.version_id, self.segment_index)

    def as_buffer(self) -> AudioBuffer:
        return AudioBuffer(self.samples, self.sample_rate)


def segment_relpath(track_id: str, version_id: str, index: int) -> str:
    return f"{track_id}/{version_id}/segment{index:04d}.wav"


def midi_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


# ---------------------------------------------------------------------------
# synthesis


def _noise_burst(out, start, n, pitch, onset, sr, velocity):
    seed = zlib.crc32(f"{pitch}:{onset}".encode())
    rng = np.random.default_rng(seed)
    n = min(n, len(out) - start)
    if n <= 0:
        return
    t = np.arange(n) / sr
    decay = 0.03 if pitch >= 42 else 0.12
    burst = rng.uniform(-1.0, 1.0, n) * np.exp(-t / decay)
    if pitch <= 40:
        burst = 0.3 * burst + np.sin(2 * np.pi * 55.0 * t) * np.exp(-t / 0.15)
    out[start : start + n] += (velocity / 127.0) * 0.6 * burst


def synthesize(piece: MidiPiece, sample_rate: int = DEFAULT_SR, table: EnsembleTable | None = None) -> AudioBuffer:
    """Render every note additively; percussion becomes enveloped noise.

    Pitched notes use four harmonics whose weights depend on the program's
    ensemble, a 10 ms linear attack and a 50 ms linear release after the note
    off.  The mix is scaled to a 0.9 peak.
    """
    table = table or default_table()
    sr = int(sample_rate)
    end_tick = piece.end_tick
    if end_tick == 0:
        return AudioBuffer(np.zeros(0), sr)
    n_total = int(np.ceil((ticks_to_seconds(piece, end_tick) + RELEASE_S) * sr)) + 1
    out = np.zeros(n_total)
    n_attack = max(1, int(round(ATTACK_S * sr)))
    n_release = max(1, int(round(RELEASE_S * sr)))
    nyquist = sr / 2.0
    for track in piece.tracks:
        amps_base = np.asarray(PARTIALS[table.ensemble[track.program]], dtype=np.float64)
        for note in track.notes:
            t0 = ticks_to_seconds(piece, note.onset)
            t1 = ticks_to_seconds(piece, note.end)
            start = int(round(t0 * sr))
            n_sustain = max(1, int(round(t1 * sr)) - start)
            if track.is_percussion:
                _noise_burst(out, start, n_sustain + n_release, note.pitch, note.onset, sr, note.velocity)
                continue
            f0 = midi_to_hz(note.pitch)
            freqs = f0 * np.arange(1, 5, dtype=np.float64)
            amps = amps_base * (note.velocity / 127.0) * 0.25
            amps = np.where(freqs < nyquist, amps, 0.0)
            kernels.render_partials(out, start, n_sustain, n_release, freqs, amps, float(sr), n_attack)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= PEAK / peak
    return AudioBuffer(out, sr)


# ---------------------------------------------------------------------------
# audio transforms


def resample_to_length(x: np.ndarray, n_out: int) -> np.ndarray:
    if n_out == len(x):
        return x.copy()
    if len(x) == 0 or n_out <= 0:
        return np.zeros(max(n_out, 0))
    # polyphase filtering with a rational ratio (error < 1e-6) is linear in
    # the length, unlike FFT resampling of awkward sizes
    ratio = Fraction(n_out, len(x)).limit_denominator(1 << 12)
    y = signal.resample_poly(x, ratio.numerator, ratio.denominator)
    if len(y) >= n_out:
        return y[:n_out]
    return np.concatenate([y, np.zeros(n_out - len(y))])


def wsola_stretch(x: np.ndarray, n_out: int, window: int = WSOLA_WINDOW, hop: int = WSOLA_HOP,
                  tolerance: int = WSOLA_TOLERANCE) -> np.ndarray:
    """Time-stretch ``x`` to ``n_out`` samples without changing pitch.

    Waveform-similarity overlap-add: each analysis frame is nudged by up to
    ``tolerance`` samples so that it lines up with the natural continuation
    of the previously copied frame.
    """
    n_in = len(x)
    if n_out == n_in:
        return x.copy()
    if n_in == 0:
        return np.zeros(n_out)
    rate = n_in / n_out  # analysis hop per synthesis hop
    win = np.hanning(window + 2)[1:-1]
    pad = window + tolerance
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + window)])
    n_frames = int(np.ceil(n_out / hop)) + 1
    out = np.zeros(n_frames * hop + window)
    norm = np.zeros_like(out)
    prev = None
    for k in range(n_frames):
        nominal = pad + int(round(k * hop * rate)) - window // 2
        if prev is None:
            pos = nominal
        else:
            target = xp[prev + hop : prev + hop + window]
            pos = nominal + int(kernels.best_offset(xp, target, nominal, tolerance))
        o = k * hop
        out[o : o + window] += win * xp[pos : pos + window]
        norm[o : o + window] += win
        prev = pos
    norm[norm < 1e-8] = 1.0
    y = out / norm
    shift = window // 2
    return y[shift : shift + n_out]


def pitch_shift_ratio(x: np.ndarray, ratio: float) -> np.ndarray:
    """Scale every frequency by ``ratio`` and keep the length."""
    if ratio == 1.0 or len(x) == 0:
        return x.copy()
    n = len(x)
    shorter = resample_to_length(x, max(1, int(round(n / ratio))))
    return wsola_stretch(shorter, n)


def apply_audio_transforms(buffer: AudioBuffer, pitch_shift: int = 0, time_shift: float = 0.0,
                           tempo_factor: float = 1.0) -> AudioBuffer:
    """Tempo change, then pitch shift, then time shift.

    ``tempo_factor`` > 1 plays faster (shorter output).  A positive
    ``time_shift`` prepends silence, a negative one trims the start.
    """
    sr = buffer.sample_rate
    x = buffer.samples.copy()
    if tempo_factor <= 0:
        raise ValueError("tempo_factor must be positive")
    if abs(time_shift) * sr >= len(x) and time_shift != 0:
        raise ValueError("time shift exceeds buffer length")
    if tempo_factor != 1.0:
        stretched = resample_to_length(x, int(round(len(x) / tempo_factor)))
        x = pitch_shift_ratio(stretched, 1.0 / tempo_factor)
    if pitch_shift != 0:
        x = pitch_shift_ratio(x, 2.0 ** (pitch_shift / 12.0))
    shift = int(round(abs(time_shift) * sr))
    if time_shift > 0:
        x = np.concatenate([np.zeros(shift), x])
    elif time_shift < 0:
        if shift >= len(x):
            raise ValueError("time shift exceeds buffer length")
        x = x[shift:]
    peak = np.max(np.abs(x)) if len(x) else 0.0
    if peak > 1.0:
        x = x / peak
    return AudioBuffer(x, sr)


# ---------------------------------------------------------------------------
# segmentation and I/O


def segment_audio(buffer: AudioBuffer, window_seconds: float = 10.0, track_id: str = "track",
                  version_id: str = "original") -> list[AudioSegment]:
    """Non-overlapping windows; a short tail survives only if at least half full."""
    if len(buffer) == 0:
        raise ValueError("cannot segment an empty buffer")
    win = int(round(window_seconds * buffer.sample_rate))
    segs = []
    start = 0
    idx = 0
    while start < len(buffer):
        chunk = buffer.samples[start : start + win]
        if len(chunk) < win and 2 * len(chunk) < win:
            break
        segs.append(AudioSegment(track_id, version_id, idx, chunk.copy(), buffer.sample_rate, window_seconds))
        idx += 1
        start += win
    return segs


def write_wav(path, buffer: AudioBuffer) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pcm = np.clip(np.round(buffer.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(buffer.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> AudioBuffer:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM WAV is supported")
        n_ch = w.getnchannels()
        sr = w.getframerate()
        raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2").astype(np.float64)
    if n_ch > 1:
        raw = raw.reshape(-1, n_ch).mean(axis=1)
    return AudioBuffer(raw / 32768.0, sr)
