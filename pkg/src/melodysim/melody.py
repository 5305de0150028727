"""Melody-track identification from per-track statistics plus context
(the same statistics averaged over the other tracks of the piece)."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .gbdt import BoostConfig, GradientBoostedTrees, TrainingError
from .midi import MidiPiece, Track, ticks_to_seconds

BASE_FEATURES = (
    "polyphony_rate",
    "note_density",
    "activation_density",
    "pitch_mean",
    "pitch_std",
    "pitch_range",
    "mean_note_duration",
    "velocity_mean",
)
FEATURE_NAMES = BASE_FEATURES + tuple("context_" + n for n in BASE_FEATURES)
CLASSIFIER_FORMAT = "melodysim-melody-classifier"
CLASSIFIER_VERSION = 1


@dataclass(frozen=True)
class TrackFeatureVector:
    polyphony_rate: float
    note_density: float
    activation_density: float
    pitch_mean: float
    pitch_std: float
    pitch_range: float
    mean_note_duration: float
    velocity_mean: float
    context: tuple[float, ...] = (0.0,) * len(BASE_FEATURES)

    def base(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in BASE_FEATURES])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.base(), np.asarray(self.context, dtype=np.float64)])


def _intervals(piece: MidiPiece, track: Track) -> np.ndarray:
    return np.array([(ticks_to_seconds(piece, n.onset), ticks_to_seconds(piece, n.end)) for n in track.notes])


def _coverage(iv: np.ndarray) -> tuple[float, float]:
    """(time with >=1 sounding note, time with >=2 sounding notes)."""
    events = sorted([(s, 1) for s, _ in iv] + [(e, -1) for _, e in iv], key=lambda x: (x[0], x[1]))
    active = 0
    last = None
    one = two = 0.0
    for t, d in events:
        if last is not None and t > last:
            if active >= 1:
                one += t - last
            if active >= 2:
                two += t - last
        active += d
        last = t
    return one, two


def _base_features(piece: MidiPiece, track: Track, piece_seconds: float) -> TrackFeatureVector:
    iv = _intervals(piece, track)
    one, two = _coverage(iv)
    pitches = np.array([n.pitch for n in track.notes], dtype=np.float64)
    vel = np.array([n.velocity for n in track.notes], dtype=np.float64)
    dur = iv[:, 1] - iv[:, 0]
    total = max(piece_seconds, 1e-9)
    return TrackFeatureVector(
        polyphony_rate=two / one if one > 0 else 0.0,
        note_density=len(track.notes) / total,
        activation_density=min(1.0, one / total),
        pitch_mean=float(pitches.mean()),
        pitch_std=float(pitches.std()),
        pitch_range=float(pitches.max() - pitches.min()),
        mean_note_duration=float(dur.mean()),
        velocity_mean=float(vel.mean()),
    )


def extract_track_features(piece: MidiPiece, track_index: int) -> TrackFeatureVector:
    track = piece.tracks[track_index]
    if not track.notes:
        raise ValueError(f"track {track_index} has no notes")
    seconds = piece.duration_seconds
    own = _base_features(piece, track, seconds)
    others = [
        _base_features(piece, t, seconds).base()
        for i, t in enumerate(piece.tracks)
        if i != track_index and t.notes and not t.is_percussion
    ]
    context = tuple(np.mean(others, axis=0)) if others else (0.0,) * len(BASE_FEATURES)
    return replace(own, context=tuple(float(c) for c in context))


def piece_features(piece: MidiPiece) -> dict[int, TrackFeatureVector]:
    """Features for every non-percussion track that has notes."""
    return {i: extract_track_features(piece, i) for i, t in enumerate(piece.tracks) if t.notes and not t.is_percussion}


@dataclass
class MelodyClassifier:
    model: GradientBoostedTrees

    def scores(self, vectors: list[TrackFeatureVector]) -> np.ndarray:
        if not vectors:
            return np.zeros(0)
        return self.model.predict_proba(np.stack([v.as_array() for v in vectors]))

    def to_json(self) -> str:
        doc = {"format": CLASSIFIER_FORMAT, "version": CLASSIFIER_VERSION, "features": list(FEATURE_NAMES),
               "model": self.model.to_dict()}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MelodyClassifier":
        doc = json.loads(text)
        if doc.get("format") != CLASSIFIER_FORMAT or doc.get("version") != CLASSIFIER_VERSION:
            raise ValueError("not a melody classifier document")
        if tuple(doc["features"]) != FEATURE_NAMES:
            raise ValueError("classifier was trained on a different feature set")
        return cls(GradientBoostedTrees.from_dict(doc["model"]))


def train_melody_classifier(examples, config: BoostConfig | None = None) -> MelodyClassifier:
    """``examples``: iterable of (TrackFeatureVector, is_melody)."""
    examples = list(examples)
    labels = np.array([bool(lab) for _, lab in examples])
    if labels.sum() < 2 or (~labels).sum() < 2:
        raise TrainingError("need at least two examples of each class")
    X = np.stack([v.as_array() for v, _ in examples])
    model = GradientBoostedTrees(config or BoostConfig()).fit(X, labels.astype(float))
    return MelodyClassifier(model)


def predict_melody_track(classifier: MelodyClassifier, piece: MidiPiece) -> tuple[int, list[float | None]]:
    """Highest-scoring eligible track (lowest index wins ties) and all scores.

    Percussion and empty tracks are not eligible; their score is ``None``.
    """
    feats = piece_features(piece)
    if not feats:
        raise ValueError("piece has no non-percussion track with notes")
    idx = sorted(feats)
    s = classifier.scores([feats[i] for i in idx])
    scores: list[float | None] = [None] * len(piece.tracks)
    for i, v in zip(idx, s):
        scores[i] = float(v)
    best = idx[int(np.argmax(s))]  # argmax returns the first maximum
    return best, scores


def assign_roles(piece: MidiPiece, melody_index: int) -> MidiPiece:
    """Mark melody, percussion, bass (lowest mean pitch among the rest) and
    accompaniment roles."""
    candidates = [
        (np.mean([n.pitch for n in t.notes]), i)
        for i, t in enumerate(piece.tracks)
        if i != melody_index and t.notes and not t.is_percussion
    ]
    bass = min(candidates)[1] if candidates else None
    tracks = []
    for i, t in enumerate(piece.tracks):
        if i == melody_index:
            role = "melody"
        elif t.is_percussion:
            role = "percussion"
        elif i == bass:
            role = "bass"
        else:
            role = "accompaniment"
        tracks.append(replace(t, role=role))
    return piece.with_tracks(tracks)


def label_piece(classifier: MelodyClassifier, piece: MidiPiece) -> MidiPiece:
    index, _ = predict_melody_track(classifier, piece)
    return assign_roles(piece, index)


def read_manifest_csv(path) -> list[tuple[str, int, bool]]:
    """Labelled-corpus manifest rows: (file, track_index, is_melody)."""
    with open(path, newline="") as fh:
        return [(r["file"], int(r["track_index"]), r["is_melody"].strip().lower() in ("1", "true", "yes"))
                for r in csv.DictReader(fh)]


def write_manifest_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "track_index", "is_melody"])
        for f, i, m in rows:
            w.writerow([f, i, int(bool(m))])
