import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from melodysim.corpus import melody_id_corpus, random_piece
from melodysim.gbdt import BoostConfig, GradientBoostedTrees, TrainingError
from melodysim.melody import (MelodyClassifier, TrackFeatureVector, assign_roles, extract_track_features,
                              piece_features, predict_melody_track, read_manifest_csv, train_melody_classifier,
                              write_manifest_csv)
from melodysim.midi import MidiPiece, NoteEvent, Track


def _examples(pieces):
    out = []
    for piece, mi in pieces:
        for i, v in piece_features(piece).items():
            out.append((v, i == mi))
    return out


@pytest.fixture(scope="module")
def classifier():
    return train_melody_classifier(_examples(melody_id_corpus(60, seed=0)))


def test_monophonic_track_has_zero_polyphony():
    t = Track(0, False, tuple(NoteEvent(60 + k, k * 480, 480) for k in range(8)))
    v = extract_track_features(MidiPiece(480, ((0, 500_000),), (t,)), 0)
    assert v.polyphony_rate == 0.0


def test_whole_notes_cover_piece():
    t = Track(0, False, tuple(NoteEvent(60, k * 1920, 1920) for k in range(4)))
    assert extract_track_features(MidiPiece(480, ((0, 500_000),), (t,)), 0).activation_density == 1.0


def test_two_track_context_is_other_track():
    a = Track(0, False, (NoteEvent(72, 0, 480), NoteEvent(76, 480, 480)))
    b = Track(0, False, (NoteEvent(40, 0, 960),))
    piece = MidiPiece(480, ((0, 500_000),), (a, b))
    va, vb = extract_track_features(piece, 0), extract_track_features(piece, 1)
    assert va.context[3] == vb.pitch_mean == 40.0


def test_single_track_context_is_zero():
    t = Track(0, False, (NoteEvent(60, 0, 480),))
    assert extract_track_features(MidiPiece(480, ((0, 500_000),), (t,)), 0).context == (0.0,) * 8


def test_empty_track_rejected():
    piece = MidiPiece(480, ((0, 500_000),), (Track(0, False, ()),))
    with pytest.raises(ValueError):
        extract_track_features(piece, 0)


@given(st.integers(0, 10_000), st.randoms())
def test_context_is_permutation_consistent(seed, r):
    piece, _ = random_piece(seed, target_seconds=12)
    order = list(range(1, len(piece.tracks)))
    r.shuffle(order)
    permuted = piece.with_tracks([piece.tracks[0]] + [piece.tracks[i] for i in order])
    a = extract_track_features(piece, 0).context
    b = extract_track_features(permuted, 0).context
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_rates_in_unit_interval():
    piece, _ = random_piece(3)
    for v in piece_features(piece).values():
        assert 0 <= v.polyphony_rate <= 1 and 0 <= v.activation_density <= 1


def test_separable_toy_set_is_fit_exactly(rng):
    X = rng.uniform(-1, 1, size=(20, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(float)
    model = GradientBoostedTrees(BoostConfig(rounds=50, min_samples_leaf=1)).fit(X, y)
    assert np.mean(model.predict(X) == y) == 1.0


def test_zero_rounds_predicts_prior():
    X = np.arange(10.0)[:, None]
    y = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0], dtype=float)
    model = GradientBoostedTrees(BoostConfig(rounds=0)).fit(X, y)
    assert np.allclose(model.predict_proba(X), 0.3)


def test_boosting_never_increases_training_loss(rng):
    X = rng.normal(size=(80, 3))
    y = (rng.random(80) < 1 / (1 + np.exp(-X[:, 0] * 2))).astype(float)
    loss = GradientBoostedTrees(BoostConfig(rounds=40)).fit(X, y).train_loss
    assert all(b <= a + 1e-15 for a, b in zip(loss, loss[1:]))


def test_single_class_rejected():
    with pytest.raises(TrainingError):
        GradientBoostedTrees(BoostConfig()).fit(np.zeros((4, 1)), np.ones(4))
    v = TrackFeatureVector(0, 1, 1, 60, 1, 2, 0.5, 90)
    with pytest.raises(TrainingError):
        train_melody_classifier([(v, True)] * 3 + [(v, False)])


def test_training_is_deterministic():
    ex = _examples(melody_id_corpus(10, seed=5))
    a = train_melody_classifier(ex).to_json()
    assert a == train_melody_classifier(ex).to_json()


def test_synthetic_corpus_accuracy_with_stump_oracle(classifier):
    test = melody_id_corpus(64, seed=99)
    n_tracks = sum(len(piece_features(p)) for p, _ in test)
    assert n_tracks >= 200
    # oracle: the planted melody is the highest-mean-pitch monophonic track
    stump_hits = 0
    for piece, mi in test:
        feats = piece_features(piece)
        mono = {i: v for i, v in feats.items() if v.polyphony_rate == 0}
        stump_hits += max(mono, key=lambda i: mono[i].pitch_mean) == mi
    assert stump_hits / len(test) >= 0.9
    # classifier: per-track accuracy on held-out pieces
    ex = _examples(test)
    scores = classifier.scores([v for v, _ in ex])
    acc = np.mean((scores > 0.5) == np.array([m for _, m in ex]))
    assert acc >= 0.9
    # piece-level recovery of the planted track
    hits = sum(predict_melody_track(classifier, p)[0] == mi for p, mi in test)
    assert hits / len(test) >= 0.9


def test_scores_in_unit_interval_and_argmax_rule(classifier):
    piece, _ = random_piece(7)
    best, scores = predict_melody_track(classifier, piece)
    valid = [s for s in scores if s is not None]
    assert all(0 <= s <= 1 for s in valid)
    assert scores[best] == max(valid)
    for i, t in enumerate(piece.tracks):
        assert (scores[i] is None) == (t.is_percussion or not t.notes)


def test_one_track_piece_and_percussion_only(classifier):
    t = Track(0, False, (NoteEvent(60, 0, 480),))
    assert predict_melody_track(classifier, MidiPiece(480, ((0, 500_000),), (t,)))[0] == 0
    drums = Track(0, True, (NoteEvent(36, 0, 480, 100, 9),))
    with pytest.raises(ValueError):
        predict_melody_track(classifier, MidiPiece(480, ((0, 500_000),), (drums,)))


def test_classifier_json_round_trip(classifier):
    again = MelodyClassifier.from_json(classifier.to_json())
    piece, _ = random_piece(11)
    vs = list(piece_features(piece).values())
    assert np.array_equal(again.scores(vs), classifier.scores(vs))


def test_assign_roles():
    piece, mi = random_piece(4)
    roles = [t.role for t in assign_roles(piece, mi).tracks]
    assert roles[mi] == "melody" and roles.count("melody") == 1 and roles.count("bass") == 1


def test_manifest_csv_round_trip(tmp_path):
    rows = [("a.mid", 0, True), ("a.mid", 1, False)]
    write_manifest_csv(tmp_path / "m.csv", rows)
    assert read_manifest_csv(tmp_path / "m.csv") == rows
