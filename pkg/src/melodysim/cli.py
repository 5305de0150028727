"""Command-line entry point: ``melodysim <command> ...``.

Commands mirror the workflow: synth (desk corpus of MIDI pieces), augment,
render, train, compare and evaluate.  Exit codes are 0 on success, 1 on a
runtime failure and 2 on invalid input or configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import DESK_SECONDS, desk_corpus
from .detect import DEFAULT_GAMMA, DEFAULT_PROP, DetectConfig, detect, write_matrix_csv, write_pgm
from .dtw import dtw_distance
from .embedder import (CheckpointError, ConfigError, TrainConfig, TrainingDiverged, TripletSampler, load_checkpoint,
                       save_checkpoint, train, write_loss_csv)
from .evaluate import PairConstructionError, build_eval_pairs, evaluate
from .features import FeatureError
from .midi import MidiError, read_midi
from .pipeline import CorpusError, CorpusManifest, FeatureStore, augment_corpus, render_corpus, segment_features, write_pieces
from .render import DEFAULT_SR, read_wav, segment_audio, synthesize

log = logging.getLogger("melodysim")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Invalid user input; maps to exit code 2."""


def _load_manifest(path) -> CorpusManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise InputError(f"no corpus manifest at {p}")
    try:
        return CorpusManifest.load(p.parent)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"invalid manifest {p}: {exc}") from exc


def _select_tracks(manifest: CorpusManifest, tracks: str | None, holdout: int, held_out: bool) -> list[str]:
    """Explicit comma list, else all tracks minus (or only) the last ``holdout``."""
    names = sorted(manifest.tracks)
    if tracks:
        chosen = [t.strip() for t in tracks.split(",") if t.strip()]
        unknown = [t for t in chosen if t not in manifest.tracks]
        if unknown:
            raise InputError(f"unknown tracks: {', '.join(unknown)}")
        return chosen
    if holdout < 0 or (holdout and holdout >= len(names)):
        raise InputError(f"--holdout must lie in [0, {len(names) - 1}]")
    if not holdout:
        return names
    return names[-holdout:] if held_out else names[:-holdout]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    pieces = desk_corpus(args.pieces, args.seed, args.seconds)
    paths = write_pieces(pieces, args.out)
    print(f"wrote {len(paths)} pieces to {args.out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    if args.versions < 1:
        raise InputError("--versions must be >= 1")
    try:
        manifest, errors = augment_corpus(args.input, args.out, args.seed, args.versions,
                                          sample_rate=args.sample_rate, window_seconds=args.window)
    except CorpusError as exc:
        raise InputError(str(exc)) from exc
    for e in errors:
        print(f"skipped {e}", file=sys.stderr)
    n_versions = sum(len(t.versions) for t in manifest.tracks.values())
    print(f"{len(manifest.tracks)} tracks, {n_versions} MIDI files; manifest {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def cmd_render(args) -> int:
    manifest = _load_manifest(args.corpus)
    report = render_corpus(manifest, write_audio=not args.no_audio)
    for e in report.errors:
        print(f"error {e}", file=sys.stderr)
    print(report.summary())
    return EXIT_RUNTIME if report.errors else EXIT_OK


def cmd_train(args) -> int:
    manifest = _load_manifest(args.corpus)
    store = FeatureStore(manifest)
    tracks = _select_tracks(manifest, args.tracks, args.holdout, held_out=False)
    corpus = store.corpus(tracks)
    if sum(1 for v in corpus.values() if v) < 2:
        raise InputError("training needs at least two rendered tracks; run `melodysim render` first")
    if args.resume:
        state = load_checkpoint(args.resume)
        config = state.config
        if args.epochs is not None:
            config = TrainConfig.from_dict({**config.__dict__, "epochs": state.epoch + args.epochs})
            state.config = config
    else:
        overrides = {k: v for k, v in (("epochs", args.epochs), ("margin", args.margin), ("learning_rate", args.lr),
                                       ("batch_size", args.batch_size)) if v is not None}
        config = TrainConfig(seed=args.seed, **overrides)
        state = None
    config.validate()
    train_store = {r: store[r] for r in store if r.track in corpus}
    sampler = TripletSampler(corpus, config.seed, config.visits_per_track, config.window_seconds)

    def report(s):
        h = s.history[-1]
        if args.verbose or s.epoch % 20 == 0 or s.epoch == s.config.epochs:
            print(f"epoch {h['epoch']:4d}  triplet {h['triplet']:.4f}  bce {h['bce']:.4f}", flush=True)

    state = train(sampler, train_store, config, state=state, on_epoch=report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, state)
    write_loss_csv(out.with_suffix(".loss.csv"), state.history)
    print(f"checkpoint {out} (epoch {state.epoch}); losses {out.with_suffix('.loss.csv')}")
    return EXIT_OK


def _load_segments(path, sample_rate: int, window: float) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p}: no such file")
    suffix = p.suffix.lower()
    try:
        if suffix in (".mid", ".midi"):
            buf = synthesize(read_midi(p), sample_rate)
        elif suffix == ".wav":
            buf = read_wav(p)
        else:
            raise InputError(f"{p}: expected a .mid/.midi or .wav file")
        segs = segment_audio(buf, window, p.stem, "input")
    except (MidiError, ValueError, EOFError) as exc:
        raise InputError(f"{p}: cannot decode: {exc}") from exc
    if not segs:
        raise InputError(f"{p}: too short for one {window:g} s segment")
    return [segment_features(s.as_buffer()) for s in segs]


def cmd_compare(args) -> int:
    config = DetectConfig(args.gamma, args.prop_threshold)
    feats_a = _load_segments(args.a, args.sample_rate, args.window)
    feats_b = _load_segments(args.b, args.sample_rate, args.window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.baseline:
        a = np.concatenate([f[args.baseline].frames for f in feats_a])
        b = np.concatenate([f[args.baseline].frames for f in feats_b])
        res = dtw_distance(a, b)
        result = {"baseline": args.baseline, "normalized_cost": res.normalized_cost, "total_cost": res.total_cost,
                  "path_length": res.path_length}
        (out / "baseline.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
        print(json.dumps(result, indent=1, sort_keys=True))
        return EXIT_OK
    if not args.checkpoint:
        raise InputError("--checkpoint is required unless --baseline is given")
    model = load_checkpoint(args.checkpoint).model
    S, key = model.pair_matrix([f["stack"].frames for f in feats_a], [f["stack"].frames for f in feats_b])
    verdict = detect(S, config)
    write_matrix_csv(out / "similarity.csv", S, [f"A{i}" for i in range(S.shape[0])], [f"B{j}" for j in range(S.shape[1])])
    write_pgm(out / "similarity.pgm", S)
    payload = json.loads(verdict.to_json())
    payload["key_shift"] = key
    (out / "verdict.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(json.dumps(payload, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = _load_manifest(args.corpus)
    store = FeatureStore(manifest)
    tracks = _select_tracks(manifest, args.tracks, args.holdout, held_out=True)
    corpus = {t: sorted(v) for t, v in store.corpus(tracks).items() if v}
    try:
        pairs = build_eval_pairs(corpus, args.seed)
        model = load_checkpoint(args.checkpoint).model
        report = evaluate(model, store, pairs, args.kfold, args.seed,
                          baselines=tuple(args.baseline.split(",")) if args.baseline else ())
    except PairConstructionError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="melodysim", description="Melody-aware music similarity toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic multi-track MIDI corpus")
    s.add_argument("out")
    s.add_argument("--pieces", type=int, default=20)
    s.add_argument("--seconds", type=float, default=DESK_SECONDS)
    s.add_argument("--seed", type=int, default=1000)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("augment", parents=[common], help="generate melody-preserving versions of each MIDI file")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--versions", type=int, default=3)
    s.add_argument("--sample-rate", type=int, default=DEFAULT_SR)
    s.add_argument("--window", type=float, default=10.0)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("render", parents=[common], help="render a corpus to segments and cache features")
    s.add_argument("corpus")
    s.add_argument("--no-audio", action="store_true", help="skip writing segment WAV files")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", parents=[common], help="train the embedding network")
    s.add_argument("corpus")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int)
    s.add_argument("--margin", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--tracks", help="comma-separated training tracks")
    s.add_argument("--holdout", type=int, default=0, help="leave out the last N tracks")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compare", parents=[common], help="compare two pieces (MIDI or WAV)")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--checkpoint")
    s.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    s.add_argument("--prop-threshold", type=float, default=DEFAULT_PROP)
    s.add_argument("--baseline", choices=("chroma", "pitch", "cqt"))
    s.add_argument("--out", default="compare_out")
    s.add_argument("--sample-rate", type=int, default=DEFAULT_SR)
    s.add_argument("--window", type=float, default=10.0)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("evaluate", parents=[common], help="balanced pair evaluation with CV thresholds")
    s.add_argument("corpus")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--kfold", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tracks", help="comma-separated evaluation tracks")
    s.add_argument("--holdout", type=int, default=0, help="evaluate on the last N tracks only")
    s.add_argument("--baseline", default="chroma", help="comma-separated DTW baselines, empty for none")
    s.add_argument("--out", default="eval_out")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, CheckpointError) as exc:
        print(f"melodysim: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        # invalid numeric ranges (gamma, prop-threshold, k) surface as ValueError
        print(f"melodysim: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDiverged, FeatureError, OSError) as exc:
        print(f"melodysim: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
