"""Corpus plumbing: augment a folder of MIDI files, render every version to
segmented audio and keep per-segment features in an on-disk cache."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import zlib
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .augment import AugmentationRecord, generate_version
from .embedder import ORIGINAL, SegmentRef, VersionInfo
from .features import FeatureError, chroma, cqt, dump_features, load_features, pitch_contour, stack_features
from .midi import MidiError, MidiPiece, read_midi, save_midi
from .render import DEFAULT_SR, AudioBuffer, apply_audio_transforms, segment_audio, synthesize, write_wav

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "melodysim-corpus"
MANIFEST_VERSION = 1
FEATURE_KINDS = ("stack", "chroma", "pitch", "cqt")
# bump when rendering or feature code changes so stale caches are rebuilt
FEATURE_REVISION = 2


class CorpusError(ValueError):
    pass


@dataclass
class VersionEntry:
    midi: str
    record: str | None = None
    pitch_shift: int = 0
    time_shift: float = 0.0
    tempo_factor: float = 1.0


@dataclass
class TrackEntry:
    source: str
    versions: dict[str, VersionEntry] = field(default_factory=dict)


@dataclass
class CorpusManifest:
    root: Path
    seed: int = 0
    n_versions: int = 3
    sample_rate: int = DEFAULT_SR
    window_seconds: float = 10.0
    tracks: dict[str, TrackEntry] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "seed": self.seed,
               "n_versions": self.n_versions, "sample_rate": self.sample_rate,
               "window_seconds": self.window_seconds,
               "tracks": {t: asdict(e) for t, e in sorted(self.tracks.items())}}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, root) -> "CorpusManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"manifest is not valid JSON: {exc}") from exc
        if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
            raise CorpusError("not a melodysim corpus manifest")
        tracks = {t: TrackEntry(e["source"], {v: VersionEntry(**ve) for v, ve in e["versions"].items()})
                  for t, e in doc["tracks"].items()}
        return cls(Path(root), int(doc["seed"]), int(doc["n_versions"]), int(doc["sample_rate"]),
                   float(doc["window_seconds"]), tracks)

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            text = path.read_text()
        except OSError as exc:
            raise CorpusError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_json(text, path.parent)

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(self.to_json())
        return path

    def version_ids(self, track: str) -> list[str]:
        return sorted(self.tracks[track].versions, key=lambda v: (v != ORIGINAL, v))

    def items(self):
        for t in sorted(self.tracks):
            for v in self.version_ids(t):
                yield t, v, self.tracks[t].versions[v]


# ---------------------------------------------------------------------------
# augmentation


@lru_cache(maxsize=1)
def default_melody_classifier():
    """Melody-track classifier trained on the synthetic labelled corpus."""
    from .corpus import melody_id_corpus
    from .melody import piece_features, train_melody_classifier

    examples = []
    for piece, mi in melody_id_corpus(200, seed=0):
        examples += [(f, i == mi) for i, f in piece_features(piece).items()]
    return train_melody_classifier(examples)


def label_melody(piece: MidiPiece, classifier=None) -> MidiPiece:
    """Keep existing roles; otherwise mark the predicted melody track."""
    from .melody import label_piece

    if any(t.role == "melody" for t in piece.tracks):
        return piece
    return label_piece(classifier or default_melody_classifier(), piece)


def track_id_for(path: Path) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", path.stem)


def version_seed(seed: int, track: str, k: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(track.encode()), k))
    return int(ss.generate_state(1, np.uint64)[0])


def augment_corpus(input_dir, out_dir, seed: int = 0, n_versions: int = 3, classifier=None,
                   sample_rate: int = DEFAULT_SR, window_seconds: float = 10.0) -> tuple[CorpusManifest, list[str]]:
    """Write original + ``n_versions`` augmented MIDI files per input piece.

    Returns the manifest and a list of per-file error messages; unparseable
    files are skipped.  Raises CorpusError when nothing could be processed.
    """
    if n_versions < 1:
        raise CorpusError("n_versions must be >= 1")
    input_dir, out = Path(input_dir), Path(out_dir)
    files = sorted(p for p in input_dir.iterdir() if p.suffix.lower() in (".mid", ".midi")) if input_dir.is_dir() else []
    if not files:
        raise CorpusError(f"no MIDI files in {input_dir}")
    manifest = CorpusManifest(out, seed, n_versions, sample_rate, window_seconds)
    errors = []
    for path in files:
        track = track_id_for(path)
        if track in manifest.tracks:
            errors.append(f"{path.name}: duplicate track id {track}; skipped")
            continue
        try:
            piece = label_melody(read_midi(path), classifier)
        except (MidiError, ValueError, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
            errors.append(f"{path.name}: {exc}")
            continue
        entry = TrackEntry(source=os.path.relpath(path, out))
        (out / "midi" / track).mkdir(parents=True, exist_ok=True)
        (out / "records" / track).mkdir(parents=True, exist_ok=True)
        rel = f"midi/{track}/{ORIGINAL}.mid"
        save_midi(piece, out / rel)
        entry.versions[ORIGINAL] = VersionEntry(rel)
        for k in range(n_versions):
            vid = f"version{k}"
            version, record = generate_version(piece, version_seed(seed, track, k))
            rel = f"midi/{track}/{vid}.mid"
            rec = f"records/{track}/{vid}.json"
            save_midi(version, out / rel)
            (out / rec).write_text(record.to_json() + "\n")
            entry.versions[vid] = VersionEntry(rel, rec, record.pitch_shift, record.time_shift, record.tempo_factor)
        manifest.tracks[track] = entry
    if not manifest.tracks:
        raise CorpusError("no input file could be augmented: " + "; ".join(errors))
    out.mkdir(parents=True, exist_ok=True)
    manifest.save()
    return manifest, errors


def write_pieces(pieces, out_dir, prefix: str = "Track") -> list[Path]:
    """Save (piece, melody_index) pairs as role-tagged MIDI files."""
    from .melody import assign_roles

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for n, (piece, mi) in enumerate(pieces):
        path = out_dir / f"{prefix}{n:05d}.mid"
        save_midi(assign_roles(piece, mi), path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# rendering and features


def segment_features(buffer: AudioBuffer) -> dict:
    q = cqt(buffer)
    c = chroma(q)
    p = pitch_contour(buffer)
    return {"stack": stack_features(q, c, p), "chroma": c, "pitch": p, "cqt": q}


def render_version(manifest: CorpusManifest, entry: VersionEntry) -> AudioBuffer:
    piece = read_midi(manifest.root / entry.midi)
    buf = synthesize(piece, manifest.sample_rate)
    return apply_audio_transforms(buf, entry.pitch_shift, entry.time_shift, entry.tempo_factor)


def cache_root(manifest: CorpusManifest) -> Path:
    env = os.environ.get("MELODYSIM_CACHE")
    return Path(env) if env else manifest.root / "features"


def _feature_path(root: Path, ref: SegmentRef, kind: str) -> Path:
    return root / ref.track / ref.version / f"segment{ref.index:04d}.{kind}.msf"


def _params(manifest: CorpusManifest, entry: VersionEntry) -> list:
    return [entry.pitch_shift, entry.time_shift, entry.tempo_factor, manifest.sample_rate,
            manifest.window_seconds, FEATURE_REVISION]


def _input_key(manifest: CorpusManifest, entry: VersionEntry) -> str:
    h = hashlib.sha256()
    h.update((manifest.root / entry.midi).read_bytes())
    h.update(json.dumps(_params(manifest, entry)).encode())
    return h.hexdigest()


@dataclass
class RenderReport:
    computed: list[str] = field(default_factory=list)
    cached: list[str] = field(default_factory=list)
    recovered: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def summary(self) -> str:
        return (f"{len(self.computed)} rendered, {len(self.cached)} cached, {len(self.recovered)} recovered "
                f"from corrupt cache, {len(self.errors)} failed")


def _cache_valid(root: Path, manifest: CorpusManifest, track: str, vid: str, entry: VersionEntry) -> str:
    """'hit', 'miss' or 'corrupt'."""
    meta_path = root / track / vid / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError):
        return "corrupt" if meta_path.exists() else "miss"
    if meta.get("params") != _params(manifest, entry):
        return "miss"
    midi = manifest.root / entry.midi
    mtime = midi.stat().st_mtime_ns
    if meta.get("midi_mtime_ns") != mtime:
        if meta.get("key") != _input_key(manifest, entry):
            return "miss"
        meta["midi_mtime_ns"] = mtime
        meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
    for i in range(int(meta.get("n_segments", -1))):
        for kind in FEATURE_KINDS:
            try:
                load_features(_feature_path(root, SegmentRef(track, vid, i), kind).read_bytes())
            except (OSError, FeatureError):
                return "corrupt"
    return "hit" if meta.get("n_segments", -1) >= 0 else "corrupt"


def render_corpus(manifest: CorpusManifest, write_audio: bool = True) -> RenderReport:
    """Render, segment and extract features for every version, reusing the
    cache when the inputs are unchanged."""
    root = cache_root(manifest)
    report = RenderReport()
    for track, vid, entry in manifest.items():
        name = f"{track}/{vid}"
        try:
            state = _cache_valid(root, manifest, track, vid, entry)
        except OSError as exc:
            report.errors.append(f"{name}: {exc}")
            continue
        if state == "hit":
            report.cached.append(name)
            continue
        if state == "corrupt":
            log.warning("feature cache for %s is corrupt; recomputing", name)
        try:
            buf = render_version(manifest, entry)
            segments = segment_audio(buf, manifest.window_seconds, track, vid)
        except (OSError, MidiError, ValueError) as exc:
            log.warning("cannot render %s: %s", name, exc)
            report.errors.append(f"{name}: {exc}")
            continue
        vdir = root / track / vid
        vdir.mkdir(parents=True, exist_ok=True)
        for old in vdir.glob("segment*.msf"):
            old.unlink()
        for seg in segments:
            ref = SegmentRef(track, vid, seg.segment_index)
            for kind, seq in segment_features(seg.as_buffer()).items():
                _feature_path(root, ref, kind).write_bytes(dump_features(seq))
            if write_audio:
                wav = manifest.root / "audio" / seg.relpath
                wav.parent.mkdir(parents=True, exist_ok=True)
                write_wav(wav, seg.as_buffer())
        meta = {"key": _input_key(manifest, entry), "params": _params(manifest, entry), "midi_mtime_ns": (manifest.root / entry.midi).stat().st_mtime_ns,
                "n_segments": len(segments), "duration_seconds": len(buf.samples) / buf.sample_rate}
        (vdir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        (report.recovered if state == "corrupt" else report.computed).append(name)
    return report


class FeatureStore(Mapping):
    """Read-only view of cached features; maps SegmentRef -> encoder frames."""

    def __init__(self, manifest: CorpusManifest, kind: str = "stack"):
        self.manifest = manifest
        self.root = cache_root(manifest)
        self.kind = kind
        self._memo: dict = {}
        self._counts: dict[tuple[str, str], int] = {}
        for track, vid, _ in manifest.items():
            try:
                meta = json.loads((self.root / track / vid / "meta.json").read_text())
            except (OSError, json.JSONDecodeError):
                continue
            self._counts[(track, vid)] = int(meta["n_segments"])

    def sequence(self, ref: SegmentRef, kind: str | None = None):
        key = (ref, kind or self.kind)
        if key not in self._memo:
            self._memo[key] = load_features(_feature_path(self.root, ref, key[1]).read_bytes())
        return self._memo[key]

    def __getitem__(self, ref: SegmentRef) -> np.ndarray:
        if not isinstance(ref, SegmentRef) or ref.index >= self._counts.get((ref.track, ref.version), 0):
            raise KeyError(ref)
        return self.sequence(ref).frames

    def __iter__(self):
        for (track, vid), n in sorted(self._counts.items()):
            for i in range(n):
                yield SegmentRef(track, vid, i)

    def __len__(self) -> int:
        return sum(self._counts.values())

    def n_segments(self, track: str, version: str) -> int:
        return self._counts.get((track, version), 0)

    def segments(self, track: str, version: str, kind: str | None = None) -> list:
        return [self.sequence(SegmentRef(track, version, i), kind).frames for i in range(self.n_segments(track, version))]

    def song(self, track: str, version: str, kind: str):
        """Concatenated per-segment features of one version."""
        return np.concatenate(self.segments(track, version, kind), axis=0)

    def corpus(self, tracks=None) -> dict[str, dict[str, VersionInfo]]:
        out = {}
        for track in sorted(tracks if tracks is not None else self.manifest.tracks):
            out[track] = {v: VersionInfo(self.n_segments(track, v), e.time_shift, e.tempo_factor, e.pitch_shift)
                          for v, e in self.manifest.tracks[track].versions.items() if self.n_segments(track, v) > 0}
        return out


def load_record(manifest: CorpusManifest, entry: VersionEntry) -> AugmentationRecord | None:
    if entry.record is None:
        return None
    return AugmentationRecord.from_json((manifest.root / entry.record).read_text())
