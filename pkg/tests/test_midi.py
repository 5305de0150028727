import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from melodysim.midi import (MidiParseError, MidiPiece, NoteEvent, Track, UnsupportedFormatError, detect_block_chords,
                            parse_midi, seconds_to_ticks, ticks_to_seconds, write_midi)

from conftest import chord_track, pieces, tracks


def _smf(track_body: bytes, fmt=0, tpq=480, ntrks=1, hlen=6) -> bytes:
    head = b"MThd" + struct.pack(">I", hlen) + struct.pack(">HHH", fmt, ntrks, tpq)
    return head + b"MTrk" + struct.pack(">I", len(track_body)) + track_body


def test_minimal_single_note():
    body = bytes([0x00, 0x90, 60, 100, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00])
    piece = parse_midi(_smf(body))
    assert piece.ticks_per_quarter == 480
    (track,) = piece.tracks
    assert track.notes == (NoteEvent(60, 0, 480, 100, 0),)


def test_running_status_and_velocity_zero_note_off():
    # second event reuses status 0x90; velocity 0 acts as note-off
    body = bytes([0x00, 0x90, 60, 100, 0x00, 64, 90, 0x83, 0x60, 60, 0, 0x00, 64, 0, 0x00, 0xFF, 0x2F, 0x00])
    notes = parse_midi(_smf(body)).tracks[0].notes
    assert [(n.pitch, n.onset, n.duration, n.velocity) for n in notes] == [(60, 0, 480, 100), (64, 0, 480, 90)]


def test_unmatched_note_on_closed_at_end_of_track():
    body = bytes([0x00, 0x90, 60, 100, 0x83, 0x60, 0xFF, 0x2F, 0x00])
    (n,) = parse_midi(_smf(body)).tracks[0].notes
    assert (n.onset, n.duration) == (0, 480)


def test_overlapping_same_pitch_is_fifo():
    body = bytes([0x00, 0x90, 60, 100, 0x10, 0x90, 60, 80, 0x10, 0x80, 60, 0, 0x10, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00])
    notes = parse_midi(_smf(body)).tracks[0].notes
    assert sorted((n.onset, n.duration, n.velocity) for n in notes) == [(0, 32, 100), (16, 32, 80)]


def test_percussion_flagged_from_channel_ten():
    body = bytes([0x00, 0x99, 36, 100, 0x60, 0x89, 36, 0, 0x00, 0xFF, 0x2F, 0x00])
    (track,) = parse_midi(_smf(body)).tracks
    assert track.is_percussion


def test_bad_header_length():
    with pytest.raises(MidiParseError) as info:
        parse_midi(_smf(b"\x00\xff\x2f\x00", hlen=7))
    assert info.value.offset == 4


def test_format_two_unsupported():
    with pytest.raises(UnsupportedFormatError):
        parse_midi(_smf(b"\x00\xff\x2f\x00", fmt=2))


def test_truncated_file_reports_offset():
    data = _smf(bytes([0x00, 0x90, 60, 100, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00]))
    with pytest.raises(MidiParseError):
        parse_midi(data[:-5])


def test_empty_piece_writes_header_only():
    data = write_midi(MidiPiece(480, ((0, 500_000),), ()))
    assert data[:4] == b"MThd" and len(data) == 14
    assert parse_midi(data) == MidiPiece(480)


def test_single_note_round_trip():
    p = MidiPiece(480, ((0, 500_000),), (Track(5, False, (NoteEvent(60, 0, 480, 100),)),))
    assert parse_midi(write_midi(p)) == p


def test_tempo_changes_survive_round_trip():
    p = MidiPiece(480, ((0, 500_000), (480, 250_000), (960, 600_000)), (Track(0, False, (NoteEvent(60, 0, 2000),)),))
    assert parse_midi(write_midi(p)).tempo_map == p.tempo_map


@given(pieces())
def test_round_trip_property(p):
    assert parse_midi(write_midi(p)) == p


def test_ticks_to_seconds_examples():
    p = MidiPiece(480, ((0, 500_000),))
    assert ticks_to_seconds(p, 480) == pytest.approx(0.5)
    assert ticks_to_seconds(p, 0) == 0.0
    q = MidiPiece(480, ((0, 500_000), (480, 250_000)))
    assert ticks_to_seconds(q, 960) == pytest.approx(0.75)


@given(pieces(), st.integers(0, 20000), st.integers(0, 20000))
def test_ticks_to_seconds_monotone_and_invertible(p, a, b):
    lo, hi = sorted((a, b))
    assert ticks_to_seconds(p, lo) <= ticks_to_seconds(p, hi)
    assert seconds_to_ticks(p, ticks_to_seconds(p, hi)) == pytest.approx(hi, abs=1e-6)


def test_block_chord_examples():
    (c,) = detect_block_chords(chord_track([60, 64, 67]))
    assert len(c.indices) == 3 and c.onset == 0 and c.duration == 480
    assert detect_block_chords(chord_track([60, 64])) == []
    regular = {480, 960, 1440, 1920}
    assert detect_block_chords(chord_track([60, 64, 67, 71], duration=360), regular) == []


def test_oversized_group_keeps_lowest_four():
    t = chord_track([60, 64, 67, 71, 74])
    (c,) = detect_block_chords(t)
    assert sorted(t.notes[i].pitch for i in c.indices) == [60, 64, 67, 71]


@given(tracks(channel=0))
def test_chord_groups_satisfy_invariant(track):
    for c in detect_block_chords(track):
        members = [track.notes[i] for i in c.indices]
        assert 3 <= len(members) <= 4
        assert {n.onset for n in members} == {c.onset}
        assert {n.duration for n in members} == {c.duration}


def test_note_invariants():
    for bad in (dict(pitch=128), dict(duration=0), dict(velocity=0), dict(channel=16)):
        kw = dict(pitch=60, onset=0, duration=10, velocity=10, channel=0) | bad
        with pytest.raises(ValueError):
            NoteEvent(**kw)
    with pytest.raises(ValueError):
        MidiPiece(480, ((10, 500_000),))
