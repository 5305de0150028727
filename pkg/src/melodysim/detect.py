"""Song-level plagiarism decisions from segment similarity matrices, plus
the evaluation metrics and threshold cross-validation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_GAMMA = 0.99
DEFAULT_PROP = 0.4
GAMMA_GRID = tuple(float(g) for g in np.round(np.concatenate([np.arange(0.50, 0.901, 0.05), np.arange(0.91, 0.991, 0.01)]), 2))
PROP_GRID = tuple(float(p) for p in np.round(np.arange(0.1, 0.901, 0.1), 2))


@dataclass(frozen=True)
class DetectConfig:
    gamma: float = DEFAULT_GAMMA
    prop_threshold: float = DEFAULT_PROP

    def __post_init__(self):
        if not (0 < self.gamma < 1 and 0 < self.prop_threshold < 1):
            raise ValueError("gamma and prop_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class Verdict:
    similar: bool
    row_fraction: float
    col_fraction: float
    gamma: float
    prop_threshold: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def similarity_matrix(model, segments_a, segments_b) -> np.ndarray:
    """S[i, j] = classifier score of segment i of A against segment j of B.

    ``model`` is a :class:`~melodysim.embedder.SimilarityModel`; each segment
    is embedded once (once per searched key when the model searches over
    transpositions of B).
    """
    if len(segments_a) == 0 or len(segments_b) == 0:
        raise ValueError("both segment lists must be non-empty")
    return model.pair_matrix(segments_a, segments_b)[0]


def decision_matrix(S, gamma: float) -> np.ndarray:
    """Binary D with D[i, j] = 1 iff S[i, j] >= gamma."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    return (np.asarray(S) >= gamma).astype(np.uint8)


def song_verdict(D, prop_threshold: float = DEFAULT_PROP, gamma: float = float("nan")) -> Verdict:
    """Similar when more than ``prop_threshold`` of the rows and of the
    columns of D hold at least one active cell."""
    D = np.asarray(D)
    if D.ndim != 2 or D.size == 0:
        raise ValueError("decision matrix must be a non-empty 2-D array")
    rows = float(np.mean(D.any(axis=1)))
    cols = float(np.mean(D.any(axis=0)))
    return Verdict(bool(rows > prop_threshold and cols > prop_threshold), rows, cols, gamma, prop_threshold)


def detect(S, config: DetectConfig = DetectConfig()) -> Verdict:
    return song_verdict(decision_matrix(S, config.gamma), config.prop_threshold, config.gamma)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, predicted, truth) -> "ConfusionMatrix":
        p = np.asarray(predicted, dtype=bool)
        t = np.asarray(truth, dtype=bool)
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)))


def _ratio(a, b):
    return a / b if b else 0.0


def _prf(tp, fp, fn):
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return {"precision": p, "recall": r, "f1": _ratio(2 * p * r, p + r), "support": tp + fn}


def compute_metrics(cm: ConfusionMatrix) -> dict:
    """Per-class precision/recall/F1, support-weighted averages and accuracy.

    Undefined ratios are 0.
    """
    if cm.total <= 0:
        raise ValueError("confusion matrix is empty")
    similar = _prf(cm.tp, cm.fp, cm.fn)
    different = _prf(cm.tn, cm.fn, cm.fp)
    n = similar["support"] + different["support"]
    weighted = {k: _ratio(similar[k] * similar["support"] + different[k] * different["support"], n)
                for k in ("precision", "recall", "f1")}
    return {"similar": similar, "different": different, "weighted": weighted,
            "accuracy": _ratio(cm.tp + cm.tn, cm.total)}


def f1_score(predicted, truth) -> float:
    return compute_metrics(ConfusionMatrix.from_predictions(predicted, truth))["similar"]["f1"]


def auc(scores, labels) -> float:
    """Rank-based ROC AUC; tied scores share half credit."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    # average ranks handle ties
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# threshold cross-validation


def _coverage(matrices):
    """Row and column maxima; a row is active at gamma iff its max >= gamma."""
    return [(np.asarray(S).max(axis=1), np.asarray(S).max(axis=0)) for S in matrices]


def _grid_predictions(cover, gammas, props) -> np.ndarray:
    """Boolean verdicts, shape (len(gammas), len(props), n_pairs)."""
    out = np.zeros((len(gammas), len(props), len(cover)), dtype=bool)
    g = np.asarray(gammas)[:, None]
    pr = np.asarray(props)[None, :]
    for n, (rmax, cmax) in enumerate(cover):
        rows = (rmax[None, :] >= g).mean(axis=1)[:, None]
        cols = (cmax[None, :] >= g).mean(axis=1)[:, None]
        out[:, :, n] = (rows > pr) & (cols > pr)
    return out


def stratified_folds(labels, k: int, seed: int = 0) -> np.ndarray:
    labels = np.asarray(labels, dtype=bool)
    rng = np.random.Generator(np.random.Philox(seed))
    fold = np.empty(len(labels), dtype=int)
    offset = 0
    for cls in (True, False):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return fold


def _best(scores: np.ndarray, gammas, props) -> tuple[int, int]:
    # ties go to the larger gamma, then the larger prop
    best = None
    for gi in range(len(gammas)):
        for pi in range(len(props)):
            key = (scores[gi, pi], gammas[gi], props[pi])
            if best is None or key >= best[0]:
                best = (key, gi, pi)
    return best[1], best[2]


@dataclass
class CVResult:
    gamma: float
    prop_threshold: float
    mean_f1: float
    fold_f1: list[float]
    heldout_predictions: np.ndarray
    heldout_f1: float

    @property
    def config(self) -> DetectConfig:
        return DetectConfig(self.gamma, self.prop_threshold)


def kfold_threshold_cv(matrices, labels, k: int = 2, seed: int = 0, gammas=GAMMA_GRID, props=PROP_GRID) -> CVResult:
    """Grid search of (gamma, prop_threshold) by stratified k-fold CV.

    The returned config maximises the mean held-out song-level F1 across
    folds (pooled over all pairs when ``k`` equals the number of pairs,
    since single-pair folds have no F1 of their own).  ``heldout_predictions``
    come from configs chosen on the training folds only, so ``heldout_f1``
    is an unbiased estimate.
    """
    labels = np.asarray(labels, dtype=bool)
    n = len(labels)
    if k < 2 or k > n:
        raise ValueError("k must lie in [2, number of pairs]")
    if len(matrices) != n:
        raise ValueError("one matrix per label")
    if labels.all() or not labels.any():
        raise ValueError("both classes are required")
    loo = k == n
    fold = stratified_folds(labels, k, seed)
    if not loo:
        for f in range(k):
            if labels[fold == f].all() or not labels[fold == f].any():
                raise ValueError(f"fold {f} does not contain both classes")
    preds = _grid_predictions(_coverage(matrices), gammas, props)

    def f1_grid(mask):
        t = labels[mask]
        p = preds[:, :, mask]
        tp = (p & t).sum(axis=2)
        fp = (p & ~t).sum(axis=2)
        fn = (~p & t).sum(axis=2)
        return np.where(2 * tp + fp + fn > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)

    if loo:
        score = f1_grid(np.ones(n, dtype=bool))
        fold_scores = [score]
    else:
        fold_scores = [f1_grid(fold == f) for f in range(k)]
        score = np.mean(fold_scores, axis=0)
    gi, pi = _best(score, gammas, props)

    heldout = np.zeros(n, dtype=bool)
    for f in range(k):
        test = fold == f
        train_score = f1_grid(~test)
        tg, tp_ = _best(train_score, gammas, props)
        heldout[test] = preds[tg, tp_, test]
    return CVResult(float(gammas[gi]), float(props[pi]), float(score[gi, pi]),
                    [float(s[gi, pi]) for s in fold_scores], heldout, f1_score(heldout, labels))


# ---------------------------------------------------------------------------
# export


def write_matrix_csv(path, S, row_ids=None, col_ids=None) -> None:
    S = np.asarray(S)
    row_ids = row_ids or [str(i) for i in range(S.shape[0])]
    col_ids = col_ids or [str(j) for j in range(S.shape[1])]
    with open(path, "w") as fh:
        fh.write("row," + ",".join(col_ids) + "\n")
        for rid, row in zip(row_ids, S):
            fh.write(rid + "," + ",".join(f"{v:.6f}" for v in row) + "\n")


def write_pgm(path, S) -> None:
    """8-bit binary greymap, white = 1."""
    S = np.clip(np.asarray(S, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(S * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{S.shape[1]} {S.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
