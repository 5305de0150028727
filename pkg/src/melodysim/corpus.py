"""Synthetic multi-track pieces with a known melody track.

Pieces are built from a repeating chord loop: a monophonic melody in the
upper register, a bass line, block-chord comping, an optional mid-register
counter line and a drum pattern.  Track order is shuffled so the melody's
index carries no information.
"""
from __future__ import annotations

import numpy as np

from .midi import MidiPiece, NoteEvent, Track

MAJOR = (0, 2, 4, 5, 7, 9, 11)
MINOR = (0, 2, 3, 5, 7, 8, 10)
MELODY_PROGRAMS = (73, 40, 56, 80, 65, 71, 68, 11, 81, 74)
CHORD_PROGRAMS = (0, 4, 24, 25, 16, 48, 89, 5, 26)
COUNTER_PROGRAMS = (41, 42, 60, 69, 71, 88, 19)
BASS_PROGRAMS = (32, 33, 34, 35, 38)
# melody rhythm cells, in eighth notes; each fills half a bar
RHYTHM_CELLS = (
    (2, 2), (4,), (1, 1, 2), (2, 1, 1), (3, 1), (1, 1, 1, 1), (2, 2), (1, 3),
)


def _scale_pitch(root, scale, degree, base_octave):
    octave, step = divmod(degree, 7)
    return 12 * (base_octave + octave) + root + scale[step]


def random_piece(seed: int, tpq: int = 480, target_seconds: float = 36.0, counter_line: bool | None = None,
                 drums: bool = True) -> tuple[MidiPiece, int]:
    """Return (piece, melody_track_index)."""
    rng = np.random.default_rng(seed)
    bpm = float(rng.uniform(80, 150))
    tempo = int(round(60e6 / bpm))
    bar = 4 * tpq
    bar_seconds = 4 * 60.0 / bpm
    n_bars = int(np.clip(round(target_seconds / bar_seconds), 8, 32))
    n_bars -= n_bars % 4
    root = int(rng.integers(0, 12))
    scale = MAJOR if rng.random() < 0.6 else MINOR
    progression = [0] + list(rng.choice([3, 4, 5, 1, 2], size=3))
    eighth = tpq // 2

    # melody: a two-bar motif and a variation, laid out A A' B A
    def motif():
        notes = []
        degree = int(rng.integers(2, 7))
        for half in range(4):
            cell = RHYTHM_CELLS[int(rng.integers(len(RHYTHM_CELLS)))]
            pos = half * 4
            for length in cell:
                degree = int(np.clip(degree + rng.choice([-2, -1, -1, 0, 1, 1, 2, 3, -3]), 0, 11))
                notes.append((pos * eighth, length * eighth, degree))
                pos += length
        return notes

    a = motif()
    b = motif()
    a2 = [(t, d, int(np.clip(g + (1 if k == len(a) - 1 else 0), 0, 11))) for k, (t, d, g) in enumerate(a)]
    phrase = [a, a2, b, a]
    mel_oct = int(rng.integers(5, 7))
    mel_notes = []
    for blk in range(n_bars // 2):
        cells = phrase[blk % 4]
        for t, d, g in cells:
            pitch = _scale_pitch(root, scale, g, mel_oct)
            pitch = int(np.clip(pitch, 60, 96))
            mel_notes.append(NoteEvent(pitch, blk * 2 * bar + t, d, int(rng.integers(90, 115)), 0))

    # chord comping and bass
    chord_pattern = [(0, 4), (0, 2, 2), (0, 1, 1, 1, 1), (0, 3, 1)][int(rng.integers(4))]
    chord_notes, bass_notes, counter_notes = [], [], []
    seventh = rng.random() < 0.4
    for bar_i in range(n_bars):
        deg = progression[bar_i % 4]
        degrees = [deg, deg + 2, deg + 4] + ([deg + 6] if seventh else [])
        pitches = sorted(_scale_pitch(root, scale, d, 4) for d in degrees)
        pos = bar_i * bar
        for q in chord_pattern[1:]:
            for p in pitches:
                chord_notes.append(NoteEvent(p, pos, q * tpq, 70, 2))
            pos += q * tpq
        bp = _scale_pitch(root, scale, deg, 2)
        bass_pattern = (2, 2) if bar_i % 2 == 0 else (1, 1, 2)
        pos = bar_i * bar
        for q in bass_pattern:
            bass_notes.append(NoteEvent(bp, pos, q * tpq, 95, 1))
            pos += q * tpq
        for k in range(2):
            cp = _scale_pitch(root, scale, deg + (2 if k else 4), 4) - 12 * int(rng.random() < 0.3)
            counter_notes.append(NoteEvent(int(np.clip(cp, 40, 70)), bar_i * bar + k * 2 * tpq, 2 * tpq, 60, 3))

    tracks = [
        Track(int(rng.choice(MELODY_PROGRAMS)), False, tuple(mel_notes), name="melody"),
        Track(int(rng.choice(BASS_PROGRAMS)), False, tuple(bass_notes), name="bass"),
        Track(int(rng.choice(CHORD_PROGRAMS)), False, tuple(chord_notes), name="chords"),
    ]
    if counter_line if counter_line is not None else rng.random() < 0.6:
        tracks.append(Track(int(rng.choice(COUNTER_PROGRAMS)), False, tuple(counter_notes), name="counter"))
    if drums:
        drum = []
        for bar_i in range(n_bars):
            for beat in range(4):
                pos = bar_i * bar + beat * tpq
                drum.append(NoteEvent(36 if beat % 2 == 0 else 38, pos, eighth, 100, 9))
                drum.append(NoteEvent(42, pos + eighth, eighth, 70, 9))
        tracks.append(Track(0, True, tuple(drum), name="drums"))

    order = rng.permutation(len(tracks))
    shuffled = [tracks[i] for i in order]
    melody_index = int(np.flatnonzero(order == 0)[0])
    return MidiPiece(tpq, ((0, tempo),), tuple(shuffled)), melody_index


def melody_id_corpus(n_pieces: int, seed: int = 0):
    """Labelled pieces for melody identification: list of (piece, melody_index)."""
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(n_pieces)
    return [random_piece(int(s), target_seconds=float(np.random.default_rng(int(s)).uniform(12, 30)))
            for s in seeds]


DESK_SECONDS = 72.0


def desk_corpus(n_pieces: int = 20, seed: int = 1000, target_seconds: float = DESK_SECONDS):
    """Pieces for the end-to-end workflow: list of (piece, melody_index)."""
    return [random_piece(seed + i, target_seconds=target_seconds) for i in range(n_pieces)]
