import json

import numpy as np
import pytest

from melodysim.embedder import TrainConfig, VersionInfo, init_state
from melodysim.evaluate import (Pair, PairConstructionError, build_eval_pairs, dtw_baseline, evaluate,
                                positive_pairs, segment_truth)
from melodysim.pipeline import FeatureStore

VERSIONS = ["original", "version0", "version1", "version2"]


def test_seven_positives_per_track():
    pos = positive_pairs("T", VERSIONS)
    assert len(pos) == 7
    assert Pair("T", "original", "T", "original", True) in pos
    assert len({(p.version_a, p.version_b) for p in pos}) == 7


def test_two_track_toy():
    pairs = build_eval_pairs({"A": VERSIONS, "B": VERSIONS})
    assert sum(p.label for p in pairs) == 14 and sum(not p.label for p in pairs) == 14
    assert all(p.track_a != p.track_b for p in pairs if not p.label)


def test_split_of_78_tracks():
    pairs = build_eval_pairs({f"Track{i:05d}": VERSIONS for i in range(78)}, seed=2)
    pos = [p for p in pairs if p.label]
    neg = [p for p in pairs if not p.label]
    assert len(pos) == 546 and len(neg) == 546
    keys = {frozenset([(p.track_a, p.version_a), (p.track_b, p.version_b)]) for p in neg}
    assert len(keys) == 546


def test_pair_construction_errors():
    with pytest.raises(PairConstructionError):
        build_eval_pairs({"A": VERSIONS})
    # one version each leaves a single possible negative for two positives
    with pytest.raises(PairConstructionError):
        build_eval_pairs({"A": ["original", "version0"], "B": ["original"]})


def test_pairs_deterministic():
    c = {t: VERSIONS for t in "ABCD"}
    assert build_eval_pairs(c, seed=1) == build_eval_pairs(c, seed=1)
    assert build_eval_pairs(c, seed=1) != build_eval_pairs(c, seed=2)


def test_segment_truth():
    infos = {"A": {"original": VersionInfo(4), "version0": VersionInfo(4, time_shift=-6.0)},
             "B": {"original": VersionInfo(3)}}
    t = segment_truth(Pair("A", "original", "A", "version0", True), (4, 4), infos)
    # original segment i is centred at 10 i + 5 s; the version plays it 6 s earlier
    assert set(np.unique(t)) == {-1, 1}
    assert [list(r).index(1) if 1 in r else None for r in t] == [None, 0, 1, 2]
    neg = segment_truth(Pair("A", "original", "B", "original", False), (4, 3), infos)
    assert np.all(neg == 0)


@pytest.fixture(scope="module")
def report(small_corpus):
    store = FeatureStore(small_corpus)
    corpus = {t: sorted(v) for t, v in store.corpus().items()}
    pairs = build_eval_pairs(corpus, seed=0)
    # a head that scores identical embeddings highest, as a trained one should
    model = init_state(TrainConfig(key_search=2), store).model
    model.head = lambda z: np.exp(-0.1 * np.abs(np.atleast_2d(z)).sum(axis=1))
    return evaluate(model, store, pairs, k=2, seed=0), pairs, store


def test_report_bookkeeping(report):
    rep, pairs, _ = report
    assert rep.n_pairs == len(pairs) == 3 * 4 * 2
    assert rep.song_cm.total == len(pairs)
    assert rep.song_cm.tp + rep.song_cm.fn == sum(p.label for p in pairs)
    n_cells = sum(np.prod(r["shape"]) for r, p in zip(rep.pairs, pairs) if not p.label)
    assert rep.segment_cm.fp + rep.segment_cm.tn == n_cells
    assert 0 <= rep.segment_auc <= 1 and 0 <= rep.song_auc <= 1
    assert all(abs(r["key_shift"]) <= 2 for r in rep.pairs)
    self_pairs = [r for r, p in zip(rep.pairs, pairs) if (p.track_a, p.version_a) == (p.track_b, p.version_b)]
    assert self_pairs and all(r["key_shift"] == 0 for r in self_pairs)


def test_report_serialisation(report):
    rep, _, _ = report
    doc = json.loads(rep.to_json())
    assert doc["n_pairs"] == rep.n_pairs and "chroma" in doc["baseline"]
    text = rep.to_text()
    assert "Song level" in text and "Segment level" in text and "baseline chroma-DTW" in text


def test_baseline_on_pairs(report):
    _, pairs, store = report
    b = dtw_baseline(store, pairs, "pitch", k=2)
    assert len(b["costs"]) == len(pairs) and 0 <= b["f1"] <= 1
    self_cost = [c for c, p in zip(b["costs"], pairs) if p.version_a == p.version_b and p.track_a == p.track_b]
    assert self_cost and all(c == 0 for c in self_cost)
