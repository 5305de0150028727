"""DTW baseline: alignment cost between feature sequences and an F1-optimal
decision threshold on those costs."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .features import FeatureSequence


@dataclass(frozen=True)
class DtwResult:
    total_cost: float
    path_length: int
    normalized_cost: float


def _frames(x) -> np.ndarray:
    arr = x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return np.ascontiguousarray(arr)


def _backtrack_length(acc: np.ndarray) -> int:
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    steps = 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            # same preference order as the forward recursion: diagonal first
            cands = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
            _, i, j = min(cands, key=lambda c: c[0])
        steps += 1
    return steps


def dtw_distance(a, b) -> DtwResult:
    """Unconstrained DTW with steps (1,0), (0,1), (1,1) and Euclidean frame cost.

    ``a`` and ``b`` are FeatureSequences or arrays of shape (frames, dim);
    1-D arrays are treated as dim 1.  The normalised cost divides by
    ``len(a) + len(b)``.
    """
    fa, fb = _frames(a), _frames(b)
    if len(fa) == 0 or len(fb) == 0:
        raise ValueError("DTW needs non-empty sequences")
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"dimension mismatch: {fa.shape[1]} vs {fb.shape[1]}")
    cost = kernels.pairwise_euclidean(fa, fb)
    acc = kernels.dtw_accumulate(cost)
    total = float(acc[-1, -1])
    return DtwResult(total, _backtrack_length(acc), total / (len(fa) + len(fb)))


def _f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = np.sum(pred & truth)
    fp = np.sum(pred & ~truth)
    fn = np.sum(~pred & truth)
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def threshold_f1(scores, labels, threshold: float) -> float:
    """F1 of the similar class when predicting similar iff score < threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    return _f1(s < threshold, y)


def fit_threshold(scores, labels) -> float:
    """Threshold maximising similar-class F1 (lower cost means similar).

    Candidates are the midpoints between consecutive distinct sorted scores
    plus one value below and one above the whole range.  Ties resolve to the
    smallest threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    if y.all() or not y.any():
        raise ValueError("both classes are required to fit a threshold")
    u = np.unique(s)
    span = max(1.0, float(u[-1] - u[0]))
    cands = np.concatenate([[u[0] - span], (u[:-1] + u[1:]) / 2.0, [u[-1] + span]])
    best_t, best_f = cands[0], -1.0
    for t in cands:
        f = _f1(s < t, y)
        if f > best_f:
            best_t, best_f = t, f
    return float(best_t)


def write_score_table(path, rows) -> None:
    """rows: iterable of (idA, idB, normalized_cost, label)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["idA", "idB", "normalized_cost", "label"])
        for a, b, c, lab in rows:
            w.writerow([a, b, f"{c:.9g}", int(bool(lab))])
