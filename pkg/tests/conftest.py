import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from melodysim.midi import MidiPiece, NoteEvent, Track

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def notes(draw, max_notes=12, channel=0, max_tick=4000):
    n = draw(st.integers(0, max_notes))
    out = []
    for _ in range(n):
        note = NoteEvent(draw(st.integers(0, 127)), draw(st.integers(0, max_tick)), draw(st.integers(1, 1920)),
                         draw(st.integers(1, 127)), channel)
        # overlapping same-pitch notes on one channel are ambiguous in SMF
        if all(o.pitch != note.pitch or o.end <= note.onset or note.end <= o.onset for o in out):
            out.append(note)
    return out


@st.composite
def tracks(draw, channel=None):
    ch = draw(st.integers(0, 15)) if channel is None else channel
    perc = ch == 9
    return Track(draw(st.integers(0, 127)), perc, tuple(draw(notes(channel=ch))),
                 role=draw(st.sampled_from([None, "melody", "bass", "accompaniment", "other"])),
                 name=draw(st.text("abcdefgh ", max_size=8)))


@st.composite
def pieces(draw, max_tracks=4):
    tpq = draw(st.sampled_from([96, 240, 480, 960]))
    n_changes = draw(st.integers(0, 3))
    ticks = sorted(set(draw(st.lists(st.integers(1, 5000), min_size=n_changes, max_size=n_changes))))
    tempo_map = [(0, draw(st.integers(200_000, 1_000_000)))] + [(t, draw(st.integers(200_000, 1_000_000))) for t in ticks]
    trs = draw(st.lists(tracks(), max_size=max_tracks))
    # a track that writes no channel event would vanish on re-read
    trs = [t for t in trs if t.notes]
    return MidiPiece(tpq, tuple(tempo_map), tuple(trs))


def chord_track(pitches, onset=0, duration=480, program=0, extra=()):
    return Track(program, False, tuple(NoteEvent(p, onset, duration, 90) for p in pitches) + tuple(extra))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, seconds=2.0, sr=22050, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Three 25 s pieces, two versions each, rendered with features."""
    from melodysim.corpus import random_piece
    from melodysim.pipeline import augment_corpus, render_corpus, write_pieces

    root = tmp_path_factory.mktemp("corpus")
    write_pieces([random_piece(500 + i, target_seconds=25) for i in range(3)], root / "midi_in")
    manifest, errors = augment_corpus(root / "midi_in", root / "out", seed=3, n_versions=2)
    assert not errors
    report = render_corpus(manifest, write_audio=False)
    assert not report.errors
    return manifest


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
