"""Balanced pair construction, segment- and song-level evaluation of a
trained similarity model, and the DTW baseline on the same pairs."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .detect import ConfusionMatrix, DetectConfig, auc, compute_metrics, f1_score, kfold_threshold_cv, stratified_folds
from .dtw import dtw_distance, fit_threshold
from .embedder import ORIGINAL, SimilarityModel, aligned_index


class PairConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class Pair:
    track_a: str
    version_a: str
    track_b: str
    version_b: str
    label: bool

    @property
    def name(self) -> str:
        return f"{self.track_a}/{self.version_a}|{self.track_b}/{self.version_b}"


def positive_pairs(track: str, versions) -> list[Pair]:
    """All unordered distinct version pairs plus the original compared with itself."""
    versions = sorted(versions, key=lambda v: (v != ORIGINAL, v))
    out = [Pair(track, a, track, b, True) for a, b in itertools.combinations(versions, 2)]
    out.append(Pair(track, versions[0], track, versions[0], True))
    return out


def build_eval_pairs(corpus, seed: int = 0) -> list[Pair]:
    """Positives per track and an equal number of cross-track negatives.

    ``corpus`` maps track -> iterable of version ids.
    """
    tracks = sorted(corpus)
    if len(tracks) < 2:
        raise PairConstructionError("need at least two tracks to build negative pairs")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(3,))))
    pos, neg = [], []
    seen = set()
    for t in tracks:
        versions = sorted(corpus[t])
        if len(versions) < 1:
            continue
        p = positive_pairs(t, versions)
        pos += p
        others = [(u, v) for u in tracks if u != t for v in sorted(corpus[u])]
        options = [(va, ob) for va in versions for ob in others]
        fresh = [o for o in options if (t, o[0], *o[1]) not in seen and (*o[1], t, o[0]) not in seen]
        if len(fresh) < len(p):
            raise PairConstructionError(f"not enough distinct negatives for track {t}")
        for i in rng.choice(len(fresh), size=len(p), replace=False):
            va, (u, vb) = fresh[int(i)]
            seen.add((t, va, u, vb))
            neg.append(Pair(t, va, u, vb, False))
    return pos + neg


def segment_truth(pair: Pair, shape, infos, window_seconds: float = 10.0) -> np.ndarray:
    """Cell labels: 1 aligned positive, 0 negative, -1 excluded.

    Every cell of a cross-track pair is negative.  In a same-track pair only
    the time-aligned cells are labelled (positive); the rest are excluded.
    """
    truth = np.zeros(shape, dtype=np.int8)
    if not pair.label:
        return truth
    truth[:] = -1
    src = infos[pair.track_a][pair.version_a]
    dst = infos[pair.track_b][pair.version_b]
    for i in range(shape[0]):
        j = aligned_index(i, src, dst, window_seconds)
        if 0 <= j < shape[1]:
            truth[i, j] = 1
    return truth


@dataclass
class EvalReport:
    n_pairs: int
    song_config: DetectConfig
    song_cm: ConfusionMatrix
    song_metrics: dict
    song_auc: float
    segment_cm: ConfusionMatrix
    segment_metrics: dict
    segment_auc: float
    cv_mean_f1: float
    nested_f1: float = float("nan")
    baseline: dict = field(default_factory=dict)
    pairs: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "song": {"gamma": self.song_config.gamma, "prop_threshold": self.song_config.prop_threshold,
                     "confusion": self.song_cm.__dict__, "metrics": self.song_metrics, "auc": self.song_auc,
                     "cv_mean_f1": self.cv_mean_f1, "nested_f1": self.nested_f1},
            "segment": {"confusion": self.segment_cm.__dict__, "metrics": self.segment_metrics,
                        "auc": self.segment_auc},
            "baseline": self.baseline,
            "pairs": self.pairs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        def table(title, m):
            lines = [title, f"{'class':<10}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>10}"]
            for cls in ("different", "similar"):
                r = m[cls]
                lines.append(f"{cls:<10}{r['precision']:>10.3f}{r['recall']:>10.3f}{r['f1']:>10.3f}{r['support']:>10d}")
            w = m["weighted"]
            lines.append(f"{'weighted':<10}{w['precision']:>10.3f}{w['recall']:>10.3f}{w['f1']:>10.3f}")
            return lines

        def cm(title, c):
            return [title, f"{'':<16}{'pred similar':>14}{'pred different':>16}",
                    f"{'true similar':<16}{c.tp:>14d}{c.fn:>16d}", f"{'true different':<16}{c.fp:>14d}{c.tn:>16d}"]

        out = table(f"Segment level (gamma={self.song_config.gamma:.2f}, AUC={self.segment_auc:.3f})",
                    self.segment_metrics)
        out += [""] + cm("Segment confusion", self.segment_cm) + [""] + cm("Song confusion", self.song_cm)
        out += [""] + table(f"Song level (gamma={self.song_config.gamma:.2f}, prop={self.song_config.prop_threshold:.2f}, "
                            f"AUC={self.song_auc:.3f})", self.song_metrics)
        out.append(f"nested cross-validated song F1={self.nested_f1:.3f}")
        for kind, b in sorted(self.baseline.items()):
            out.append(f"baseline {kind}-DTW: F1={b['f1']:.3f} precision={b['precision']:.3f} "
                       f"recall={b['recall']:.3f} AUC={b['auc']:.3f}")
        return "\n".join(out) + "\n"


def evaluate(model: SimilarityModel, store, pairs: list[Pair], k: int = 2, seed: int = 0,
             baselines=("chroma",)) -> EvalReport:
    """Song and segment metrics at the (gamma, prop_threshold) chosen by
    k-fold CV over all pairs.

    ``nested_f1`` is the stricter estimate in which each fold is scored with
    thresholds chosen on the other folds only.
    """
    if not pairs:
        raise PairConstructionError("no pairs to evaluate")
    infos = store.corpus()
    window = store.manifest.window_seconds
    emb = {}

    def embeddings(track, version):
        if (track, version) not in emb:
            segs = store.segments(track, version)
            if not segs:
                raise PairConstructionError(f"no segments for {track}/{version}")
            emb[(track, version)] = model.embed_keys(segs)
        return emb[(track, version)]

    matrices, keys = [], []
    for p in pairs:
        S, key = model.best_key_matrix(embeddings(p.track_a, p.version_a)[0], embeddings(p.track_b, p.version_b))
        matrices.append(S)
        keys.append(key)
    labels = np.array([p.label for p in pairs])
    cv = kfold_threshold_cv(matrices, labels, k, seed)
    gamma = cv.gamma
    song_scores = np.array([min(np.mean(S.max(axis=1) >= gamma), np.mean(S.max(axis=0) >= gamma)) for S in matrices])
    predicted = song_scores > cv.prop_threshold
    song_cm = ConfusionMatrix.from_predictions(predicted, labels)
    seg_scores, seg_truth = [], []
    pair_rows = []
    for p, S, pred, sc, key in zip(pairs, matrices, predicted, song_scores, keys):
        truth = segment_truth(p, S.shape, infos, window)
        keep = truth >= 0
        seg_scores.append(S[keep])
        seg_truth.append(truth[keep] == 1)
        pair_rows.append({"pair": p.name, "label": bool(p.label), "predicted": bool(pred),
                          "song_score": float(sc), "key_shift": int(key), "shape": list(S.shape)})
    seg_scores = np.concatenate(seg_scores)
    seg_truth = np.concatenate(seg_truth)
    seg_cm = ConfusionMatrix.from_predictions(seg_scores >= gamma, seg_truth)

    report = EvalReport(len(pairs), cv.config, song_cm, compute_metrics(song_cm), auc(song_scores, labels),
                        seg_cm, compute_metrics(seg_cm), auc(seg_scores, seg_truth), cv.mean_f1, cv.heldout_f1, pairs=pair_rows)
    for kind in baselines:
        report.baseline[kind] = dtw_baseline(store, pairs, kind, k, seed)
    return report


def dtw_baseline(store, pairs: list[Pair], kind: str = "chroma", k: int = 2, seed: int = 0) -> dict:
    """Normalised DTW cost per song pair; thresholds fitted on training folds."""
    songs = {}

    def song(track, version):
        if (track, version) not in songs:
            songs[(track, version)] = store.song(track, version, kind)
        return songs[(track, version)]

    costs = np.array([dtw_distance(song(p.track_a, p.version_a), song(p.track_b, p.version_b)).normalized_cost
                      for p in pairs])
    labels = np.array([p.label for p in pairs])
    fold = stratified_folds(labels, k, seed)
    pred = np.zeros(len(pairs), dtype=bool)
    for f in range(k):
        test = fold == f
        threshold = fit_threshold(costs[~test], labels[~test])
        pred[test] = costs[test] < threshold
    m = compute_metrics(ConfusionMatrix.from_predictions(pred, labels))["similar"]
    return {"kind": kind, "f1": f1_score(pred, labels), "precision": m["precision"], "recall": m["recall"],
            "auc": auc(-costs, labels), "costs": costs.tolist()}
