"""Melody-preserving variations of a MIDI piece.

Every random draw comes from a Philox stream keyed by ``(seed, operation,
track)``, so a version is a pure function of the piece and the seed and
per-track draws do not depend on the order in which tracks are processed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .instruments import GUITAR_PROGRAMS, PIANO_PROGRAMS, EnsembleTable, default_table
from .midi import MidiPiece, Track, detect_block_chords

P_RETAIN = 0.2
P_WITHIN = 0.7
NOTE_PROB_RANGE = (0.3, 0.85)
REMOVAL_PROB_RANGE = (0.1, 0.5)
P_MUTE_PERCUSSION = 0.5
PITCH_SHIFT_RANGE = (-4, 4)
TIME_SHIFT_RANGE = (-3.0, 3.0)
TEMPO_RANGE = (0.9, 1.1)

# stream ids
_INSTRUMENTS, _REMOVAL, _PROBS, _SPLIT, _INVERT, _ARPEGGIO, _AUDIO = range(7)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for one (operation, track) stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class InstrumentOutcome:
    source: int
    branch: str  # retain | within | cross | percussion
    target: int
    fallback: bool = False


@dataclass
class AugmentationRecord:
    seed: int
    instruments: list[InstrumentOutcome] = field(default_factory=list)
    muted: list[bool] = field(default_factory=list)
    track_removal_p: float = 0.0
    p_note: list[float] = field(default_factory=list)
    p_chinv: list[float] = field(default_factory=list)
    p_charg: list[float] = field(default_factory=list)
    pitch_shift: int = 0
    time_shift: float = 0.0
    tempo_factor: float = 1.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugmentationRecord":
        d = json.loads(text)
        d["instruments"] = [InstrumentOutcome(**o) for o in d["instruments"]]
        return cls(**d)

    @classmethod
    def identity(cls, n_tracks: int = 0) -> "AugmentationRecord":
        """Parameters of an unmodified original."""
        return cls(seed=-1, muted=[False] * n_tracks)


# ---------------------------------------------------------------------------
# instrument replacement


def _replace_instruments(piece: MidiPiece, table: EnsembleTable, rng) -> tuple[MidiPiece, list[InstrumentOutcome]]:
    groups: dict[int, list[int]] = {}
    for i, t in enumerate(piece.tracks):
        if not t.is_percussion:
            groups.setdefault(t.program, []).append(i)
    branches = {}
    for program in sorted(groups):
        if rng.random() < P_RETAIN:
            branches[program] = "retain"
        elif rng.random() < P_WITHIN:
            branches[program] = "within"
        else:
            branches[program] = "cross"

    # source programs are never handed out as targets, so keeping is always
    # an injective fallback
    reserved = set(groups)
    target_of: dict[int, tuple[int, bool]] = {}
    for program in sorted(groups):
        branch = branches[program]
        if branch == "retain":
            target_of[program] = (program, False)
            continue
        ens = table.ensemble[program]
        if branch == "within":
            cands = [p for p in table.members(ens) if p not in reserved]
        else:
            reg = table.register[program]
            cands = [p for p in range(128) if table.ensemble[p] != ens and table.register[p] == reg and p not in reserved]
        if not cands:
            target_of[program] = (program, True)
            continue
        target = int(cands[int(rng.integers(len(cands)))])
        reserved.add(target)
        target_of[program] = (target, False)

    tracks, outcomes = [], []
    for t in piece.tracks:
        if t.is_percussion:
            tracks.append(t)
            outcomes.append(InstrumentOutcome(t.program, "percussion", t.program))
            continue
        target, fell_back = target_of[t.program]
        tracks.append(replace(t, program=target))
        outcomes.append(InstrumentOutcome(t.program, branches[t.program], target, fell_back))
    return piece.with_tracks(tracks), outcomes


def replace_instruments(piece: MidiPiece, table: EnsembleTable | None = None, rng=None) -> MidiPiece:
    """Per group of same-program tracks: keep (p=0.2), else re-pick inside the
    ensemble (p=0.7) or from another ensemble of the same register.

    Distinct source programs never end up on the same target program.
    """
    rng = rng if rng is not None else np.random.default_rng()
    return _replace_instruments(piece, table or default_table(), rng)[0]


# ---------------------------------------------------------------------------
# track removal


def is_protected(track: Track) -> bool:
    if track.is_percussion:
        return False
    if track.role in ("melody", "bass"):
        return True
    return track.program in PIANO_PROGRAMS or track.program in GUITAR_PROGRAMS


def _remove_tracks(piece: MidiPiece, rng, protected=None) -> tuple[MidiPiece, list[bool], float]:
    if protected is None:
        protected = [is_protected(t) for t in piece.tracks]
    p = float(rng.uniform(*REMOVAL_PROB_RANGE))
    muted = []
    for t, keep in zip(piece.tracks, protected):
        u = rng.random()
        if keep:
            muted.append(False)
        elif t.is_percussion:
            muted.append(bool(u < P_MUTE_PERCUSSION))
        else:
            muted.append(bool(u < p))
    if piece.tracks and all(muted):
        keep = next((i for i, t in enumerate(piece.tracks) if not t.is_percussion), 0)
        muted[keep] = False
    kept = [t for t, m in zip(piece.tracks, muted) if not m]
    return piece.with_tracks(kept), muted, p


def remove_tracks(piece: MidiPiece, rng=None) -> MidiPiece:
    """Mute unprotected tracks with a per-piece probability from U[0.1, 0.5],
    percussion with probability 0.5.  Melody, bass, piano and guitar tracks
    stay; at least one track always remains."""
    rng = rng if rng is not None else np.random.default_rng()
    return _remove_tracks(piece, rng)[0]


# ---------------------------------------------------------------------------
# note-level operations


def typical_durations(tpq: int) -> tuple[int, ...]:
    return (4 * tpq, 2 * tpq, tpq)


def regular_chord_durations(tpq: int) -> tuple[int, ...]:
    return (tpq, 2 * tpq, 3 * tpq, 4 * tpq)


def split_notes(track: Track, p_note: float, rng, tpq: int) -> Track:
    """Split whole/half/quarter notes into two halves with probability ``p_note``."""
    typical = set(typical_durations(tpq))
    out = []
    for n in track.notes:
        if n.duration in typical and rng.random() < p_note:
            first = n.duration // 2
            out.append(replace(n, duration=first))
            out.append(replace(n, onset=n.onset + first, duration=n.duration - first))
        else:
            out.append(n)
    return track.with_notes(out)


def invert_chords(track: Track, p_chinv: float, rng) -> Track:
    """Per block chord, with probability ``p_chinv``: drop the top note an
    octave or raise the bottom note an octave (fair coin; the other move is
    used when the chosen one leaves the MIDI range)."""
    notes = list(track.notes)
    for chord in detect_block_chords(track):
        if not rng.random() < p_chinv:
            continue
        down = rng.random() < 0.5
        members = sorted(chord.indices, key=lambda i: notes[i].pitch)
        top, bottom = members[-1], members[0]
        can_down = notes[top].pitch - 12 >= 0
        can_up = notes[bottom].pitch + 12 <= 127
        if down and not can_down:
            down = False
        elif not down and not can_up:
            down = True
        if down and can_down:
            notes[top] = replace(notes[top], pitch=notes[top].pitch - 12)
        elif not down and can_up:
            notes[bottom] = replace(notes[bottom], pitch=notes[bottom].pitch + 12)
    return track.with_notes(notes)


def arpeggiate_chords(track: Track, p_charg: float, rng, tpq: int) -> Track:
    """Replace block chords lasting 1-4 quarters by an ascending arpeggio over
    the same span; the last note absorbs any remainder of the division."""
    notes = list(track.notes)
    drop = set()
    added = []
    for chord in detect_block_chords(track, regular_chord_durations(tpq)):
        if not rng.random() < p_charg:
            continue
        size = len(chord.indices)
        each = chord.duration // size
        if each < 1:
            continue
        members = sorted((notes[i] for i in chord.indices), key=lambda n: n.pitch)
        for k, n in enumerate(members):
            dur = each if k < size - 1 else chord.duration - each * (size - 1)
            added.append(replace(n, onset=chord.onset + k * each, duration=dur))
        drop.update(chord.indices)
    kept = [n for i, n in enumerate(notes) if i not in drop]
    return track.with_notes(kept + added)


# ---------------------------------------------------------------------------
# full version


def ensure_roles(piece: MidiPiece) -> MidiPiece:
    """Fill in bass/percussion/accompaniment roles around an assigned melody."""
    melody = [i for i, t in enumerate(piece.tracks) if t.role == "melody"]
    if not melody:
        raise ValueError("piece has no track with role 'melody'")
    if any(t.role == "bass" for t in piece.tracks):
        tracks = [replace(t, role=t.role or ("percussion" if t.is_percussion else "accompaniment"))
                  for t in piece.tracks]
        return piece.with_tracks(tracks)
    from .melody import assign_roles

    return assign_roles(piece, melody[0])


def generate_version(piece: MidiPiece, seed: int, table: EnsembleTable | None = None) -> tuple[MidiPiece, AugmentationRecord]:
    """One augmented version: instruments, track removal, then per track
    note splitting, chord inversion and arpeggiation; the melody track only
    gets note splitting.  Audio-stage parameters are sampled into the record.
    """
    table = table or default_table()
    seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
    piece = ensure_roles(piece)
    tpq = piece.ticks_per_quarter
    record = AugmentationRecord(seed=seed)

    # importance is judged on the original instrumentation
    protected = [is_protected(t) for t in piece.tracks]
    piece, record.instruments = _replace_instruments(piece, table, stream(seed, _INSTRUMENTS))
    survivors, record.muted, record.track_removal_p = _remove_tracks(piece, stream(seed, _REMOVAL), protected)
    kept_index = [i for i, m in enumerate(record.muted) if not m]

    for n in range(len(piece.tracks)):
        p_note, p_chinv, p_charg = stream(seed, _PROBS, n).uniform(*NOTE_PROB_RANGE, size=3)
        record.p_note.append(float(p_note))
        record.p_chinv.append(float(p_chinv))
        record.p_charg.append(float(p_charg))

    tracks = []
    for n, t in zip(kept_index, survivors.tracks):
        if t.is_percussion:
            tracks.append(t)
            continue
        t = split_notes(t, record.p_note[n], stream(seed, _SPLIT, n), tpq)
        if t.role != "melody":
            t = invert_chords(t, record.p_chinv[n], stream(seed, _INVERT, n))
            t = arpeggiate_chords(t, record.p_charg[n], stream(seed, _ARPEGGIO, n), tpq)
        tracks.append(t)

    audio = stream(seed, _AUDIO)
    record.pitch_shift = int(audio.integers(PITCH_SHIFT_RANGE[0], PITCH_SHIFT_RANGE[1] + 1))
    record.time_shift = float(audio.uniform(*TIME_SHIFT_RANGE))
    record.tempo_factor = float(audio.uniform(*TEMPO_RANGE))
    return survivors.with_tracks(tracks), record


# ---------------------------------------------------------------------------
# checks shared by tests and the CLI


def collapse_runs(pitches) -> list[int]:
    out = []
    for p in pitches:
        if not out or out[-1] != p:
            out.append(p)
    return out


def is_split_of(original: Track, version: Track, tpq: int) -> bool:
    """True when ``version`` is ``original`` with some typical-duration notes
    split into halves and nothing else changed (pitch, velocity, timing)."""
    key = lambda n: (n.onset, n.pitch, n.duration, n.velocity)  # noqa: E731
    remaining = {}
    for n in version.notes:
        remaining[key(n)] = remaining.get(key(n), 0) + 1
    typical = set(typical_durations(tpq))
    for n in original.notes:
        if remaining.get(key(n), 0) > 0:
            remaining[key(n)] -= 1
            continue
        if n.duration not in typical:
            return False
        first = n.duration // 2
        halves = [(n.onset, n.pitch, first, n.velocity), (n.onset + first, n.pitch, n.duration - first, n.velocity)]
        for h in halves:
            if remaining.get(h, 0) <= 0:
                return False
            remaining[h] -= 1
    return all(v == 0 for v in remaining.values())


def melody_preserved(original: Track, version: Track) -> bool:
    """Pitch sequences agree once runs of equal pitches are merged."""
    return collapse_runs(n.pitch for n in original.notes) == collapse_runs(n.pitch for n in version.notes)


def sounding_ticks(track: Track) -> int:
    """Length of the union of all note intervals."""
    total = 0
    cur_start = cur_end = None
    for n in sorted(track.notes, key=lambda n: n.onset):
        if cur_end is None or n.onset > cur_end:
            if cur_end is not None:
                total += cur_end - cur_start
            cur_start, cur_end = n.onset, n.end
        else:
            cur_end = max(cur_end, n.end)
    if cur_end is not None:
        total += cur_end - cur_start
    return total


def melody_track(piece: MidiPiece) -> Track:
    for t in piece.tracks:
        if t.role == "melody":
            return t
    raise ValueError("no melody track")

