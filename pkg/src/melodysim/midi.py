"""Standard MIDI File reading/writing and the symbolic score types.

Only what the rest of the package needs is modelled: notes, per-track
program, a tempo map and a couple of meta strings.  SMF formats 0 and 1 with
PPQ time division are supported.
"""
from __future__ import annotations

import struct
from collections import defaultdict, deque
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

DEFAULT_TEMPO = 500_000  # µs per quarter, 120 BPM
PERCUSSION_CHANNEL = 9
ROLES = ("melody", "bass", "accompaniment", "percussion", "other")
_ROLE_PREFIX = "role:"


class MidiError(Exception):
    """Base class for MIDI problems."""


class MidiParseError(MidiError):
    """Malformed SMF data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedFormatError(MidiError):
    pass


class MidiWriteError(MidiError):
    pass


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: int
    duration: int
    velocity: int = 100
    channel: int = 0

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if self.duration < 1:
            raise ValueError(f"duration must be >= 1 tick, got {self.duration}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if not 0 <= self.channel <= 15:
            raise ValueError(f"channel out of range: {self.channel}")
        if self.onset < 0:
            raise ValueError("negative onset")

    @property
    def end(self) -> int:
        return self.onset + self.duration


def _note_key(n: NoteEvent):
    return (n.onset, n.pitch, n.duration, n.velocity, n.channel)


@dataclass(frozen=True)
class Track:
    program: int = 0
    is_percussion: bool = False
    notes: tuple[NoteEvent, ...] = ()
    role: str | None = None
    name: str = ""

    def __post_init__(self):
        if not 0 <= self.program <= 127:
            raise ValueError(f"program out of range: {self.program}")
        if self.role is not None and self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "notes", tuple(sorted(self.notes, key=_note_key)))

    def with_notes(self, notes: Iterable[NoteEvent]) -> "Track":
        return replace(self, notes=tuple(notes))

    @property
    def end_tick(self) -> int:
        return max((n.end for n in self.notes), default=0)


@dataclass(frozen=True)
class MidiPiece:
    ticks_per_quarter: int = 480
    tempo_map: tuple[tuple[int, int], ...] = ((0, DEFAULT_TEMPO),)
    tracks: tuple[Track, ...] = ()

    def __post_init__(self):
        if self.ticks_per_quarter <= 0 or self.ticks_per_quarter >= 0x8000:
            raise ValueError("ticks_per_quarter must be in 1..32767")
        tm = tuple((int(t), int(us)) for t, us in self.tempo_map)
        if not tm or tm[0][0] != 0:
            raise ValueError("tempo map needs an entry at tick 0")
        if any(b[0] <= a[0] for a, b in zip(tm, tm[1:])):
            raise ValueError("tempo map ticks must be strictly increasing")
        if any(us <= 0 or us > 0xFFFFFF for _, us in tm):
            raise ValueError("tempo out of range")
        object.__setattr__(self, "tempo_map", tm)
        object.__setattr__(self, "tracks", tuple(self.tracks))

    @property
    def end_tick(self) -> int:
        return max((t.end_tick for t in self.tracks), default=0)

    @property
    def duration_seconds(self) -> float:
        return ticks_to_seconds(self, self.end_tick)

    def with_tracks(self, tracks: Iterable[Track]) -> "MidiPiece":
        return replace(self, tracks=tuple(tracks))


@dataclass(frozen=True)
class ChordGroup:
    """Track-local note indices forming one block chord."""

    indices: tuple[int, ...]
    onset: int
    duration: int

    def __post_init__(self):
        if not 3 <= len(self.indices) <= 4:
            raise ValueError("a block chord has 3 or 4 notes")


# ---------------------------------------------------------------------------
# time conversion


def ticks_to_seconds(piece: MidiPiece, tick: int | float) -> float:
    if tick < 0:
        raise ValueError("tick must be non-negative")
    tpq = piece.ticks_per_quarter
    seconds = 0.0
    tm = piece.tempo_map
    for k, (start, tempo) in enumerate(tm):
        stop = tm[k + 1][0] if k + 1 < len(tm) else None
        if stop is None or tick <= stop:
            return seconds + (tick - start) * tempo / (1e6 * tpq)
        seconds += (stop - start) * tempo / (1e6 * tpq)
    return seconds  # pragma: no cover


def seconds_to_ticks(piece: MidiPiece, seconds: float) -> float:
    """Inverse of :func:`ticks_to_seconds` (fractional ticks)."""
    tpq = piece.ticks_per_quarter
    elapsed = 0.0
    tm = piece.tempo_map
    for k, (start, tempo) in enumerate(tm):
        sec_per_tick = tempo / (1e6 * tpq)
        if k + 1 < len(tm):
            seg = (tm[k + 1][0] - start) * sec_per_tick
            if seconds <= elapsed + seg:
                return start + (seconds - elapsed) / sec_per_tick
            elapsed += seg
        else:
            return start + (seconds - elapsed) / sec_per_tick
    return 0.0  # pragma: no cover


# ---------------------------------------------------------------------------
# chords


def detect_block_chords(track: Track, regular_durations: Iterable[int] | None = None) -> list[ChordGroup]:
    """Find 3- or 4-note block chords (exact onset and duration equality).

    Notes at one onset are grouped by duration.  Groups larger than four keep
    their four lowest pitches.  When several groups at the same onset qualify
    the largest wins, ties going to the group with the lowest pitch.
    """
    allowed = set(regular_durations) if regular_durations is not None else None
    by_onset: dict[int, dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
    for i, n in enumerate(track.notes):
        by_onset[n.onset][n.duration].append(i)

    chords = []
    for onset in sorted(by_onset):
        best = None
        for dur, idx in by_onset[onset].items():
            if len(idx) < 3:
                continue
            idx = sorted(idx, key=lambda i: track.notes[i].pitch)[:4]
            key = (-len(idx), track.notes[idx[0]].pitch, dur)
            if best is None or key < best[0]:
                best = (key, idx, dur)
        if best is None:
            continue
        _, idx, dur = best
        if allowed is not None and dur not in allowed:
            continue
        chords.append(ChordGroup(tuple(idx), onset, dur))
    return chords


# ---------------------------------------------------------------------------
# reading


def _read_vlq(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


_CHANNEL_MSG_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


class _TrackBuilder:
    def __init__(self):
        self.notes: list[NoteEvent] = []
        self.open: dict[tuple[int, int], deque] = defaultdict(deque)
        self.programs: dict[int, int] = {}
        self.program_channels: list[int] = []
        self.name = ""
        self.role: str | None = None
        self.tempos: list[tuple[int, int]] = []
        self.has_channel_events = False

    def note_on(self, tick, ch, pitch, vel):
        self.open[(ch, pitch)].append((tick, vel))

    def note_off(self, tick, ch, pitch):
        q = self.open.get((ch, pitch))
        if not q:
            return  # stray note-off
        onset, vel = q.popleft()
        self.notes.append(NoteEvent(pitch, onset, max(1, tick - onset), vel, ch))

    def close(self, tick):
        for (ch, pitch), q in sorted(self.open.items()):
            while q:
                onset, vel = q.popleft()
                self.notes.append(NoteEvent(pitch, onset, max(1, tick - onset), vel, ch))


def _parse_track(data: bytes, pos: int, end: int) -> _TrackBuilder:
    tb = _TrackBuilder()
    tick = 0
    status = None
    while pos < end:
        delta, pos = _read_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("truncated event", pos)
        b = data[pos]
        if b == 0xFF:
            if pos + 1 >= end:
                raise MidiParseError("truncated meta event", pos)
            mtype = data[pos + 1]
            length, p = _read_vlq(data, pos + 2, end)
            if p + length > end:
                raise MidiParseError("meta event overruns track", pos)
            payload = data[p : p + length]
            pos = p + length
            if mtype == 0x2F:
                break
            if mtype == 0x51 and length == 3:
                tb.tempos.append((tick, int.from_bytes(payload, "big")))
            elif mtype == 0x03:
                tb.name = payload.decode("latin-1")
            elif mtype == 0x01:
                text = payload.decode("latin-1")
                if text.startswith(_ROLE_PREFIX) and text[len(_ROLE_PREFIX):] in ROLES:
                    tb.role = text[len(_ROLE_PREFIX):]
            continue
        if b in (0xF0, 0xF7):
            length, p = _read_vlq(data, pos + 1, end)
            if p + length > end:
                raise MidiParseError("sysex overruns track", pos)
            pos = p + length
            continue
        if b & 0x80:
            if b >= 0xF0:
                raise MidiParseError(f"unexpected system message 0x{b:02X}", pos)
            status = b
            pos += 1
        elif status is None:
            raise MidiParseError("data byte without running status", pos)
        kind = status & 0xF0
        ch = status & 0x0F
        n = _CHANNEL_MSG_LEN[kind]
        if pos + n > end:
            raise MidiParseError("truncated channel message", pos)
        d1 = data[pos]
        d2 = data[pos + 1] if n == 2 else 0
        pos += n
        tb.has_channel_events = True
        if kind == 0x90 and d2 > 0:
            tb.note_on(tick, ch, d1, d2)
        elif kind == 0x80 or kind == 0x90:
            tb.note_off(tick, ch, d1)
        elif kind == 0xC0:
            if ch not in tb.programs:
                tb.programs[ch] = d1
                tb.program_channels.append(ch)
    tb.close(tick)
    return tb


def _builder_to_tracks(tb: _TrackBuilder, split_channels: bool) -> list[Track]:
    if not tb.has_channel_events:
        return []
    if split_channels:
        channels = sorted({n.channel for n in tb.notes} | set(tb.programs))
        groups = [(ch, [n for n in tb.notes if n.channel == ch]) for ch in channels]
    else:
        first = tb.notes[0].channel if tb.notes else (tb.program_channels[0] if tb.program_channels else 0)
        groups = [(first, tb.notes)]
    tracks = []
    for ch, notes in groups:
        chans = {n.channel for n in notes} or {ch}
        tracks.append(
            Track(
                program=tb.programs.get(ch, 0),
                is_percussion=chans == {PERCUSSION_CHANNEL},
                notes=tuple(notes),
                role=tb.role,
                name=tb.name,
            )
        )
    return tracks


def parse_midi(data: bytes) -> MidiPiece:
    """Parse SMF bytes (format 0 or 1) into a :class:`MidiPiece`."""
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen != 6:
        raise MidiParseError(f"MThd length must be 6, got {hlen}", 4)
    fmt, ntrks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise UnsupportedFormatError("SMF format 2 is not supported")
    if fmt not in (0, 1):
        raise MidiParseError(f"unknown SMF format {fmt}", 8)
    if division & 0x8000:
        raise UnsupportedFormatError("SMPTE time division is not supported")
    if division == 0:
        raise MidiParseError("zero ticks per quarter", 12)

    pos = 14
    tracks: list[Track] = []
    tempos: dict[int, int] = {}
    for _ in range(ntrks):
        # skip unknown chunks
        while True:
            if pos + 8 > len(data):
                raise MidiParseError("truncated chunk header", pos)
            cid = data[pos : pos + 4]
            (clen,) = struct.unpack(">I", data[pos + 4 : pos + 8])
            if pos + 8 + clen > len(data):
                raise MidiParseError("chunk overruns file", pos)
            if cid == b"MTrk":
                break
            pos += 8 + clen
        tb = _parse_track(data, pos + 8, pos + 8 + clen)
        pos += 8 + clen
        for t, us in tb.tempos:
            tempos[t] = us
        tracks.extend(_builder_to_tracks(tb, split_channels=fmt == 0))

    tempos.setdefault(0, DEFAULT_TEMPO)
    tempo_map = tuple(sorted(tempos.items()))
    return MidiPiece(division, tempo_map, tuple(tracks))


def read_midi(path) -> MidiPiece:
    with open(path, "rb") as fh:
        return parse_midi(fh.read())


# ---------------------------------------------------------------------------
# writing


def _vlq(value: int) -> bytes:
    if value < 0:
        raise MidiWriteError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _meta(mtype: int, payload: bytes) -> bytes:
    return bytes([0xFF, mtype]) + _vlq(len(payload)) + payload


def _chunk(events: Sequence[tuple[int, bytes]]) -> bytes:
    body = bytearray()
    last = 0
    for tick, msg in events:
        body += _vlq(tick - last)
        body += msg
        last = tick
    body += _vlq(0) + _meta(0x2F, b"")
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def _track_events(track: Track) -> list[tuple[int, bytes]]:
    channels = sorted({n.channel for n in track.notes})
    if len(channels) > 16:
        raise MidiWriteError("track uses more than 16 channels")
    if not channels:
        channels = [PERCUSSION_CHANNEL if track.is_percussion else 0]
    head: list[tuple[int, bytes]] = []
    if track.name:
        head.append((0, _meta(0x03, track.name.encode("latin-1"))))
    if track.role:
        head.append((0, _meta(0x01, (_ROLE_PREFIX + track.role).encode("latin-1"))))
    for ch in channels:
        head.append((0, bytes([0xC0 | ch, track.program])))
    # (tick, order, pitch, msg): note-offs sort before note-ons at equal ticks
    body = []
    for n in track.notes:
        body.append((n.onset, 1, n.pitch, n.channel, bytes([0x90 | n.channel, n.pitch, n.velocity])))
        body.append((n.end, 0, n.pitch, n.channel, bytes([0x80 | n.channel, n.pitch, 0])))
    body.sort(key=lambda e: e[:4])
    return head + [(e[0], e[4]) for e in body]


def write_midi(piece: MidiPiece) -> bytes:
    """Serialize as SMF format 1 (conductor track first)."""
    chunks = []
    default_tempo = piece.tempo_map == ((0, DEFAULT_TEMPO),)
    if piece.tracks or not default_tempo:
        conductor = [(t, _meta(0x51, us.to_bytes(3, "big"))) for t, us in piece.tempo_map]
        chunks.append(_chunk(conductor))
    for track in piece.tracks:
        chunks.append(_chunk(_track_events(track)))
    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), piece.ticks_per_quarter)
    return header + b"".join(chunks)


def save_midi(piece: MidiPiece, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_midi(piece))
