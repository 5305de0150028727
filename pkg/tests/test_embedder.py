import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import signal

from melodysim.embedder import (CheckpointError, ConfigError, EncoderNet, PairClassifierHead, SegmentRef,
                                SimilarityModel, TrainConfig, Triplet, TripletSampler, VersionInfo, aligned_index,
                                batch_loss_and_grads, bce_pair_loss, build_triplets, classify_pair, embed,
                                embed_many, init_state, load_checkpoint, save_checkpoint, train, triplet_loss,
                                write_loss_csv, write_triplets_jsonl)
from melodysim.features import transpose_stack
from melodysim.render import AudioBuffer, apply_audio_transforms, segment_audio

from oracles import finite_difference_probes, toy_batch, toy_network

vec = st.lists(st.floats(-3, 3, allow_nan=False), min_size=4, max_size=4).map(np.array)


def test_triplet_loss_examples():
    a = np.zeros(2)
    assert triplet_loss(a, np.array([0.5, 0]), np.array([2.0, 0])) == 0.0
    assert triplet_loss(a, np.array([1.0, 0]), np.array([0, 1.2])) == pytest.approx(0.8)
    p = np.array([0.3, -0.4])
    assert triplet_loss(a, p, p, margin=1.0) == 1.0


@given(vec, vec, vec, st.floats(0.1, 3))
def test_triplet_loss_zero_when_margin_met(xa, xp, xn, margin):
    if np.linalg.norm(xa - xn) >= np.linalg.norm(xa - xp) + margin:
        assert triplet_loss(xa, xp, xn, margin) == 0.0
    assert triplet_loss(xa, xp, xn, margin) >= 0


@given(vec, vec, vec, st.integers(0, 10_000))
def test_triplet_loss_rotation_invariant(xa, xp, xn, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((4, 4)))
    assert math.isclose(triplet_loss(xa, xp, xn), triplet_loss(q @ xa, q @ xp, q @ xn), abs_tol=1e-9)


def test_bce_examples():
    assert bce_pair_loss(0.5, 0.5) == pytest.approx(2 * math.log(2))
    assert bce_pair_loss(1 - 1e-12, 1e-12) < 1e-10
    assert bce_pair_loss(0.6, 0.3) < bce_pair_loss(0.5, 0.3)
    assert bce_pair_loss(0.6, 0.4) > bce_pair_loss(0.6, 0.3)
    with pytest.raises(ValueError):
        bce_pair_loss(0.0, 0.5)


@pytest.fixture(scope="module")
def net():
    return toy_network(0)


@given(vec, vec)
def test_classify_pair_symmetric(a, b):
    head = PairClassifierHead.init(np.random.default_rng(0), in_dim=4, hidden=3)
    s = classify_pair(head, a, b)
    assert s == classify_pair(head, b, a) and 0 < s < 1


def test_zero_difference_is_constant(net):
    _, head = net
    x, y = np.ones(64), np.arange(64.0)
    assert classify_pair(head, x, x) == classify_pair(head, y, y)


def test_constant_input_pooling():
    enc = EncoderNet.init(np.random.default_rng(0))
    row = np.random.default_rng(1).random(97)
    short = embed(enc, np.tile(row, (5, 1))).values
    long = embed(enc, np.tile(row, (50, 1))).values
    assert np.allclose(short, long, rtol=1e-12, atol=1e-12)


def test_embedding_deterministic_and_distinct(net):
    enc, _ = net
    rng = np.random.default_rng(3)
    x = rng.random((12, 97))
    assert np.array_equal(embed(enc, x).values, embed(enc, x).values)
    for _ in range(100):
        a, b = rng.random((12, 97)), rng.random((12, 97))
        assert not np.array_equal(embed(enc, a).values, embed(enc, b).values)


def test_embed_dimension_mismatch(net):
    with pytest.raises(ValueError):
        embed(net[0], np.zeros((5, 12)))


def test_batched_equals_single(net):
    enc, _ = net
    rng = np.random.default_rng(4)
    seqs = [rng.random((n, 97)) for n in (5, 8, 5, 9)]
    batched = embed_many(enc, seqs)
    for s, e in zip(seqs, batched):
        assert np.allclose(embed(enc, s).values, e, atol=1e-12)


def test_gradients_match_finite_differences():
    probes = finite_difference_probes(20)
    assert max(p[-1] for p in probes) < 1e-3


def test_bce_only_step_leaves_encoder_bit_identical(net):
    enc, head = toy_network(1)
    cfg = TrainConfig(triplet_weight=0.0)
    before = {k: v.copy() for k, v in enc.params.items()}
    probe = np.random.default_rng(9).random((6, 97))
    out_before = embed(enc, probe).values
    state = init_state(cfg)
    state.encoder, state.head = enc, head
    batch = toy_batch(1)
    store = {SegmentRef(f"T{r}", "original", i): batch[r][i] for r in range(3) for i in range(5)}
    triplets = [Triplet(SegmentRef("T0", "original", i), SegmentRef("T0", "original", (i + 1) % 5),
                        SegmentRef("T2", "original", i)) for i in range(5)]
    head_before = {k: v.copy() for k, v in head.params.items()}
    train(triplets, store, cfg, state=state, epochs=1)
    assert all(np.array_equal(before[k], enc.params[k]) for k in before)
    assert np.array_equal(out_before, embed(enc, probe).values)
    assert any(not np.array_equal(head_before[k], head.params[k]) for k in head_before)


def test_without_stop_gradient_bce_reaches_encoder():
    enc, head = toy_network(2)
    cfg = TrainConfig(triplet_weight=0.0)
    _, g_sg, _ = batch_loss_and_grads(enc, head, *toy_batch(2), cfg, stop_gradient=True)
    _, g_full, _ = batch_loss_and_grads(enc, head, *toy_batch(2), cfg, stop_gradient=False)
    assert g_sg is None and any(np.any(v != 0) for v in g_full.values())


def _toy_corpus(rng, n_tracks=2, n_seg=4, frames=10, noise=0.05, spread=1.0):
    """Each track is a random pattern around a shared one; versions add noise."""
    store, corpus = {}, {}
    shared = rng.random((frames, 97))
    for t in range(n_tracks):
        base = [shared + spread * rng.normal(0, 0.3, (frames, 97)) for _ in range(n_seg)]
        corpus[f"T{t}"] = {}
        for v in ("original", "version0", "version1"):
            corpus[f"T{t}"][v] = VersionInfo(n_seg)
            for i in range(n_seg):
                store[SegmentRef(f"T{t}", v, i)] = base[i] + (0 if v == "original" else rng.normal(0, noise, (frames, 97)))
    return store, corpus


def test_training_descends():
    # versions are noisier than the gap between tracks, so the untrained
    # network violates the margin
    store, corpus = _toy_corpus(np.random.default_rng(0), noise=0.3, spread=0.2)
    cfg = TrainConfig(epochs=200, batch_size=8, seed=0, transpose_range=0, key_search=0)
    sampler = TripletSampler(corpus, 0, visits_per_track=4)
    assert sum(math.ceil(len(sampler(e)) / 8) for e in range(200)) == 200
    hist = train(sampler, store, cfg).history
    first = np.mean([h["triplet"] for h in hist[:10]])
    last = np.mean([h["triplet"] for h in hist[-10:]])
    assert first > 0.1 and last < first
    assert hist[-1]["bce"] < hist[0]["bce"]


def test_training_is_deterministic(tmp_path):
    store, corpus = _toy_corpus(np.random.default_rng(1))
    cfg = TrainConfig(epochs=3, batch_size=4, seed=5)
    paths = []
    for run in range(2):
        state = train(TripletSampler(corpus, 5), store, cfg)
        paths.append(tmp_path / f"ck{run}")
        save_checkpoint(paths[-1], state)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_checkpoint_round_trip_and_resume(tmp_path):
    store, corpus = _toy_corpus(np.random.default_rng(2))
    cfg = TrainConfig(epochs=2, batch_size=4, seed=1)
    state = train(TripletSampler(corpus, 1), store, cfg)
    save_checkpoint(tmp_path / "ck", state)
    back = load_checkpoint(tmp_path / "ck")
    assert back.epoch == 2 and back.config == cfg and back.history == state.history
    x = store[SegmentRef("T0", "original", 0)]
    assert np.allclose(embed(back.encoder, x).values, embed(state.encoder, x).values, atol=1e-4)
    resumed = train(TripletSampler(corpus, 1), store, cfg, state=back, epochs=2)
    assert [h["epoch"] for h in resumed.history] == [0, 1, 2, 3]
    write_loss_csv(tmp_path / "loss.csv", resumed.history)
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,triplet,bce,total"


def test_checkpoint_corruption(tmp_path):
    store, corpus = _toy_corpus(np.random.default_rng(2))
    state = init_state(TrainConfig(), store)
    save_checkpoint(tmp_path / "ck", state)
    data = bytearray((tmp_path / "ck").read_bytes())
    data[100] ^= 0xFF
    (tmp_path / "bad").write_bytes(bytes(data))
    (tmp_path / "bad.json").write_text((tmp_path / "ck.json").read_text())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "trunc").write_bytes(bytes(data[:50]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc")
    (tmp_path / "ck.json").unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_invalid_config():
    for bad in (dict(margin=0.0), dict(margin=-1.0), dict(learning_rate=0), dict(momentum=1.0),
                dict(transpose_range=12), dict(tempo_jitter=1.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_triplet_validation():
    a = SegmentRef("T1", "version0", 2)
    with pytest.raises(ValueError):
        Triplet(a, SegmentRef("T2", "original", 2), SegmentRef("T3", "original", 0))
    with pytest.raises(ValueError):
        Triplet(a, SegmentRef("T1", "original", 2), SegmentRef("T1", "version1", 0))


def test_build_triplets_example():
    corpus = {"Track00125": {"original": VersionInfo(6), "version0": VersionInfo(6)},
              "Track00126": {"original": VersionInfo(5), "version0": VersionInfo(5)}}
    trips = build_triplets(corpus, np.random.default_rng(0))
    assert len(trips) == 2 * 4
    for t in trips:
        assert t.anchor.index == t.positive.index and t.anchor.version != t.positive.version
        assert t.negative.track != t.anchor.track
    assert str(SegmentRef("Track00125", "version0", 2)) == "Track00125/version0/segment02"


def test_build_triplets_single_track(caplog):
    assert build_triplets({"T": {"original": VersionInfo(3), "version0": VersionInfo(3)}},
                          np.random.default_rng(0)) == []
    assert "two tracks" in caplog.text


def test_single_version_track_skipped(caplog):
    corpus = {"A": {"original": VersionInfo(3)}, "B": {"original": VersionInfo(3), "version0": VersionInfo(3)}}
    trips = build_triplets(corpus, np.random.default_rng(0))
    assert trips and all(t.anchor.track == "B" for t in trips)
    assert "single version" in caplog.text


def test_positive_shift_recorded():
    corpus = {"A": {"original": VersionInfo(3), "version0": VersionInfo(3, pitch_shift=3)},
              "B": {"original": VersionInfo(3), "version0": VersionInfo(3, pitch_shift=-2)}}
    for t in build_triplets(corpus, np.random.default_rng(0)):
        info = corpus[t.anchor.track]
        assert t.positive_shift == info[t.anchor.version].pitch_shift - info[t.positive.version].pitch_shift


def test_triplets_jsonl(tmp_path):
    t = Triplet(SegmentRef("A", "version0", 1), SegmentRef("A", "original", 1), SegmentRef("B", "original", 0))
    write_triplets_jsonl(tmp_path / "t.jsonl", [t])
    assert '"anchor": "A/version0/segment0001.wav"' in (tmp_path / "t.jsonl").read_text()


@pytest.mark.parametrize("shift", [3.0, -3.0, 4.9, 5.2, -5.3])
def test_alignment_matches_cross_correlation(shift):
    sr, window = 1000, 10.0
    x = np.random.default_rng(0).standard_normal(60 * sr)
    orig = AudioBuffer(x, sr)
    version = apply_audio_transforms(orig, time_shift=shift)
    segs = segment_audio(version, window)
    src, dst = VersionInfo(len(segs), time_shift=shift), VersionInfo(6)
    for i in range(1, len(segs) - 1):
        predicted = aligned_index(i, src, dst, window)
        # oracle: locate the middle of the version segment in the original
        # by cross-correlation
        centre_t = (i + 0.5) * window - shift
        if not 0 <= centre_t < 60:
            continue
        seg = segs[i].samples
        lo = max(0, int(len(seg) / 2 - 2 * sr))
        probe = seg[lo : lo + 4 * sr]
        c = signal.correlate(x, probe, mode="valid", method="fft")
        start = int(np.argmax(c)) - lo
        oracle = int((start + len(seg) / 2) // (window * sr))
        assert predicted == oracle
    if abs(shift) < 5:
        assert aligned_index(3, src, dst, window) == 3


def test_alignment_with_tempo():
    src = VersionInfo(10, time_shift=0.0, tempo_factor=0.5)  # twice as long
    assert aligned_index(3, src, VersionInfo(10), 10.0) == 1  # centre 35 s -> original 17.5 s


def _stub_model(key_search):
    class Head:
        def __call__(self, z):
            return np.exp(-np.abs(np.atleast_2d(z)).sum(axis=1))

    return SimilarityModel(EncoderNet.init(np.random.default_rng(0)), Head(), key_search)


def test_key_search_undoes_transposition():
    rng = np.random.default_rng(0)
    segs = []
    for _ in range(3):
        f = np.zeros((8, 97))
        f[:, 12 + 30 : 12 + 60] = rng.random((8, 30))
        f[:, :12] = rng.random((8, 12))
        f[:, 96] = rng.uniform(1, 3, 8)
        segs.append(f)
    moved = [transpose_stack(s, 3) for s in segs]
    S, k = _stub_model(8).pair_matrix(segs, moved)
    assert k == -3
    assert np.allclose(np.diag(S), 1.0)
    S0, k0 = _stub_model(0).pair_matrix(segs, moved)
    assert k0 == 0 and np.all(np.diag(S0) < 1)


def test_key_search_ties_prefer_no_shift():
    seg = np.zeros((4, 97))
    S, k = _stub_model(4).pair_matrix([seg], [seg])
    assert k == 0
