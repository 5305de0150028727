"""Melody-aware segment embeddings.

A small 1-D convolutional ResNet maps a (frames, 97) feature sequence to a
64-d vector by mean pooling over time.  Training combines a triplet margin
loss on the embeddings with a pair classifier (``|xa - xb|`` -> 32 -> 1,
sigmoid) trained by binary cross-entropy behind a stop-gradient, so the
classifier never pushes on the encoder.  Gradients are derived by hand.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .features import ENCODER_DIM, FeatureSequence, stretch_stack, transpose_stack
from .render import segment_relpath

log = logging.getLogger(__name__)

EMBED_DIM = 64
HEAD_HIDDEN = 32
N_BLOCKS = 4
KERNEL = 3
ORIGINAL = "original"


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    margin: float = 1.0
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    triplet_weight: float = 1.0
    bce_weight: float = 1.0
    visits_per_track: int = 4
    window_seconds: float = 10.0
    # move each positive into its anchor's key using the recorded pitch shifts
    align_positive_key: bool = True
    # random key changes during training: one shift shared by anchor and
    # positive, an independent one for the negative, both in
    # [-transpose_range, transpose_range] semitones
    transpose_range: int = 6
    # each training sequence is time-stretched by a random factor within
    # [1 / (1 + tempo_jitter), 1 + tempo_jitter]
    tempo_jitter: float = 0.0
    # inference compares song pairs under every global transposition in
    # [-key_search, key_search] and keeps the best match
    key_search: int = 8

    def validate(self) -> "TrainConfig":
        if not self.margin > 0:
            raise ConfigError("margin must be > 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.visits_per_track < 1:
            raise ConfigError("batch_size, visits_per_track must be >= 1 and epochs >= 0")
        if self.triplet_weight < 0 or self.bce_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.window_seconds > 0:
            raise ConfigError("window_seconds must be > 0")
        if not 0 <= self.transpose_range <= 11 or not 0 <= self.key_search <= 11:
            raise ConfigError("transpose_range and key_search must lie in [0, 11]")
        if not 0 <= self.tempo_jitter < 1:
            raise ConfigError("tempo_jitter must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known).validate()


# ---------------------------------------------------------------------------
# layers


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    # smooth activation keeps finite-difference gradient checks meaningful
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _pad_replicate(x, p):
    return np.concatenate([np.repeat(x[:, :1], p, axis=1), x, np.repeat(x[:, -1:], p, axis=1)], axis=1)


def conv_forward(x, w, b):
    """Same-length 1-D convolution with replicate padding.

    x: (B, T, Cin), w: (K, Cin, Cout), b: (Cout,).  Returns (out, cols).
    """
    k = w.shape[0]
    t = x.shape[1]
    xp = _pad_replicate(x, k // 2)
    cols = np.concatenate([xp[:, i : i + t] for i in range(k)], axis=2)
    out = cols @ w.reshape(-1, w.shape[2]) + b
    return out, cols


def conv_backward(dout, cols, w):
    k, cin, cout = w.shape
    bsz, t, _ = dout.shape
    dw = (cols.reshape(-1, k * cin).T @ dout.reshape(-1, cout)).reshape(w.shape)
    db = dout.sum(axis=(0, 1))
    dcols = (dout @ w.reshape(-1, cout).T).reshape(bsz, t, k, cin)
    p = k // 2
    dxp = np.zeros((bsz, t + 2 * p, cin))
    for i in range(k):
        dxp[:, i : i + t] += dcols[:, :, i]
    dx = dxp[:, p : p + t].copy()
    # replicated border samples all came from the first/last frame
    dx[:, 0] += dxp[:, :p].sum(axis=1)
    dx[:, -1] += dxp[:, p + t :].sum(axis=1)
    return dx, dw, db


# ---------------------------------------------------------------------------
# networks


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("embedding must be a finite 1-D vector")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass
class EncoderNet:
    """Conv stem, residual blocks ``act(h + conv(act(conv(h))))``, mean pool.

    ``act`` is SiLU, ``x * sigmoid(x)``.

    ``in_mean``/``in_std`` standardise the input and are not trained.
    """

    params: dict[str, np.ndarray]
    in_mean: np.ndarray
    in_std: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int = ENCODER_DIM, width: int = EMBED_DIM,
             n_blocks: int = N_BLOCKS, kernel: int = KERNEL) -> "EncoderNet":
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")

        def he(cin, cout, gain=1.0):
            return gain * rng.standard_normal((kernel, cin, cout)) * math.sqrt(2.0 / (kernel * cin))

        params = {"stem.w": he(in_dim, width), "stem.b": np.zeros(width)}
        for i in range(n_blocks):
            params[f"block{i}.conv1.w"] = he(width, width)
            params[f"block{i}.conv1.b"] = np.zeros(width)
            # small second conv keeps each block close to identity at start
            params[f"block{i}.conv2.w"] = he(width, width, 0.1)
            params[f"block{i}.conv2.b"] = np.zeros(width)
        return cls(params, np.zeros(in_dim), np.ones(in_dim))

    @property
    def in_dim(self) -> int:
        return self.params["stem.w"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.params["stem.w"].shape[2]

    @property
    def n_blocks(self) -> int:
        return sum(1 for k in self.params if k.endswith(".conv1.w"))

    def set_normalization(self, frames: np.ndarray) -> None:
        frames = np.asarray(frames, dtype=np.float64)
        self.in_mean = frames.mean(axis=0)
        self.in_std = np.maximum(frames.std(axis=0), 1e-3)

    def forward(self, x: np.ndarray):
        """x: (B, T, in_dim) -> (embeddings (B, width), cache)."""
        p = self.params
        x = (np.asarray(x, dtype=np.float64) - self.in_mean) / self.in_std
        u, cols = conv_forward(x, p["stem.w"], p["stem.b"])
        h = _silu(u)
        cache = [("stem", cols, u)]
        for i in range(self.n_blocks):
            u1, c1 = conv_forward(h, p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"])
            a = _silu(u1)
            r, c2 = conv_forward(a, p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"])
            s = h + r
            h = _silu(s)
            cache.append((i, c1, u1, c2, s))
        return h.mean(axis=1), cache

    def backward(self, de: np.ndarray, cache, grads: dict[str, np.ndarray]) -> None:
        """Accumulate parameter gradients for upstream gradient ``de`` (B, width)."""
        p = self.params
        t = cache[0][2].shape[1]
        dh = np.repeat(de[:, None, :] / t, t, axis=1)
        for i, c1, u1, c2, s in reversed(cache[1:]):
            ds = dh * _silu_grad(s)
            da, dw, db = conv_backward(ds, c2, p[f"block{i}.conv2.w"])
            grads[f"block{i}.conv2.w"] += dw
            grads[f"block{i}.conv2.b"] += db
            du1 = da * _silu_grad(u1)
            dh_in, dw, db = conv_backward(du1, c1, p[f"block{i}.conv1.w"])
            grads[f"block{i}.conv1.w"] += dw
            grads[f"block{i}.conv1.b"] += db
            dh = ds + dh_in
        _, cols, u = cache[0]
        _, dw, db = conv_backward(dh * _silu_grad(u), cols, p["stem.w"])
        grads["stem.w"] += dw
        grads["stem.b"] += db


@dataclass
class PairClassifierHead:
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int = EMBED_DIM, hidden: int = HEAD_HIDDEN) -> "PairClassifierHead":
        return cls({
            "fc1.w": rng.standard_normal((in_dim, hidden)) * math.sqrt(2.0 / in_dim),
            "fc1.b": np.zeros(hidden),
            "fc2.w": rng.standard_normal(hidden) * math.sqrt(1.0 / hidden),
            "fc2.b": np.zeros(()),
        })

    def logits(self, z: np.ndarray):
        p = self.params
        u = z @ p["fc1.w"] + p["fc1.b"]
        a = _silu(u)
        return a @ p["fc2.w"] + p["fc2.b"], (z, u, a)

    def backward(self, ds: np.ndarray, cache, grads: dict[str, np.ndarray]) -> np.ndarray:
        p = self.params
        z, u, a = cache
        grads["fc2.w"] += a.T @ ds
        grads["fc2.b"] += ds.sum()
        du = np.outer(ds, p["fc2.w"]) * _silu_grad(u)
        grads["fc1.w"] += z.T @ du
        grads["fc1.b"] += du.sum(axis=0)
        return du @ p["fc1.w"].T

    def __call__(self, z: np.ndarray) -> np.ndarray:
        s, _ = self.logits(np.atleast_2d(z))
        return _sigmoid(s)


# ---------------------------------------------------------------------------
# losses and inference


def triplet_loss(xa, xp, xn, margin: float = 1.0) -> float:
    """max(|xa - xp| - |xa - xn| + margin, 0) with Euclidean distances."""
    xa, xp, xn = (np.asarray(getattr(v, "values", v), dtype=np.float64) for v in (xa, xp, xn))
    if not xa.shape == xp.shape == xn.shape:
        raise ValueError("embeddings must have equal dimensions")
    return max(float(np.linalg.norm(xa - xp) - np.linalg.norm(xa - xn) + margin), 0.0)


def bce_pair_loss(y_same: float, y_diff: float) -> float:
    """-log(y_same) - log(1 - y_diff): same pair labelled 1, different pair 0."""
    if not (0 < y_same < 1 and 0 < y_diff < 1):
        raise ValueError("scores must lie in (0, 1)")
    return -math.log(y_same) - math.log1p(-y_diff)


_SCORE_EPS = 1e-12


def classify_pair(head: PairClassifierHead, xa, xb) -> float:
    a = np.asarray(getattr(xa, "values", xa), dtype=np.float64)
    b = np.asarray(getattr(xb, "values", xb), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("embeddings must have equal dimensions")
    return float(np.clip(head(np.abs(a - b))[0], _SCORE_EPS, 1 - _SCORE_EPS))


def _as_frames(seq) -> np.ndarray:
    frames = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    if frames.ndim != 2 or len(frames) == 0:
        raise ValueError("feature sequence must be a non-empty (frames, dim) array")
    return frames


def embed_many(net: EncoderNet, seqs: Sequence) -> np.ndarray:
    """Embeddings (N, width); sequences of equal length are batched together."""
    frames = [_as_frames(s) for s in seqs]
    out = np.empty((len(frames), net.out_dim))
    for idx, batch in _group_by_length(frames):
        if batch.shape[2] != net.in_dim:
            raise ValueError(f"feature dim {batch.shape[2]} does not match encoder input {net.in_dim}")
        out[idx], _ = net.forward(batch)
    return out


def embed(net: EncoderNet, seq) -> EmbeddingVector:
    return EmbeddingVector(embed_many(net, [seq])[0])


def _group_by_length(frames: list[np.ndarray]):
    groups: dict[int, list[int]] = {}
    for i, f in enumerate(frames):
        groups.setdefault(len(f), []).append(i)
    for length in sorted(groups):
        idx = np.array(groups[length])
        yield idx, np.stack([frames[i] for i in idx])


@dataclass
class SimilarityModel:
    """Siamese scoring; ``key_search`` > 0 enables the global transposition
    search of :meth:`pair_matrix`."""

    encoder: EncoderNet
    head: PairClassifierHead
    key_search: int = 0

    def embed(self, seqs: Sequence) -> np.ndarray:
        return embed_many(self.encoder, seqs)

    def embed_keys(self, seqs: Sequence) -> dict[int, np.ndarray]:
        """Embeddings of every transposition in the search range."""
        frames = [_as_frames(s) for s in seqs]
        return {k: self.embed([_shifted(f, k) for f in frames])
                for k in range(-self.key_search, self.key_search + 1)}

    def score_matrix(self, ea: np.ndarray, eb: np.ndarray) -> np.ndarray:
        z = np.abs(ea[:, None, :] - eb[None, :, :]).reshape(-1, ea.shape[1])
        return np.clip(self.head(z), _SCORE_EPS, 1 - _SCORE_EPS).reshape(len(ea), len(eb))

    def best_key_matrix(self, ea: np.ndarray, eb_keys: Mapping[int, np.ndarray]) -> tuple[np.ndarray, int]:
        """Matrix for the transposition of B whose best-aligned segments
        score highest on average (ties go to the smallest shift)."""
        best = None
        for k in sorted(eb_keys, key=lambda k: (abs(k), k)):
            S = self.score_matrix(ea, eb_keys[k])
            fit = 0.5 * (S.max(axis=1).mean() + S.max(axis=0).mean())
            if best is None or fit > best[0]:
                best = (fit, S, k)
        return best[1], best[2]

    def pair_matrix(self, segs_a: Sequence, segs_b: Sequence) -> tuple[np.ndarray, int]:
        return self.best_key_matrix(self.embed(segs_a), self.embed_keys(segs_b))


# ---------------------------------------------------------------------------
# batch objective with hand-derived gradients


@dataclass
class BatchLoss:
    triplet: float
    bce: float
    total: float


def zero_grads(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def batch_loss_and_grads(encoder: EncoderNet, head: PairClassifierHead, anchors, positives, negatives,
                         config: TrainConfig, stop_gradient: bool = True):
    """Mean over the batch of ``wt * L_triplet + wb * L_bce``.

    Returns (BatchLoss, encoder grads or None, head grads or None).  With
    ``stop_gradient`` the BCE term does not reach the encoder; a part that
    receives no gradient at all comes back as ``None``.
    """
    seqs = [_as_frames(s) for s in (*anchors, *positives, *negatives)]
    n = len(anchors)
    if n == 0 or len(positives) != n or len(negatives) != n:
        raise ValueError("anchors, positives and negatives must be equal-length, non-empty")
    emb = np.empty((3 * n, encoder.out_dim))
    caches = []
    for idx, batch in _group_by_length(seqs):
        emb[idx], cache = encoder.forward(batch)
        caches.append((idx, cache))
    ea, ep, en = emb[:n], emb[n : 2 * n], emb[2 * n :]
    wt, wb = config.triplet_weight, config.bce_weight

    dap = ea - ep
    dan = ea - en
    d_pos = np.linalg.norm(dap, axis=1)
    d_neg = np.linalg.norm(dan, axis=1)
    hinge = d_pos - d_neg + config.margin
    active = hinge > 0
    l_trip = float(np.mean(np.where(active, hinge, 0.0)))

    s_same, c_same = head.logits(np.abs(dap))
    s_diff, c_diff = head.logits(np.abs(dan))
    l_bce = float(np.mean(_softplus(-s_same) + _softplus(s_diff)))
    loss = BatchLoss(l_trip, l_bce, wt * l_trip + wb * l_bce)

    head_grads = None
    dz_same = dz_diff = None
    if wb > 0:
        head_grads = zero_grads(head.params)
        ds_same = wb * (_sigmoid(s_same) - 1.0) / n
        ds_diff = wb * _sigmoid(s_diff) / n
        dz_same = head.backward(ds_same, c_same, head_grads)
        dz_diff = head.backward(ds_diff, c_diff, head_grads)

    de = np.zeros_like(emb)
    touched = False
    if wt > 0:
        # unit vectors; a zero distance contributes a zero subgradient
        up = np.divide(dap, d_pos[:, None], out=np.zeros_like(dap), where=d_pos[:, None] > 0)
        un = np.divide(dan, d_neg[:, None], out=np.zeros_like(dan), where=d_neg[:, None] > 0)
        g = (wt * active / n)[:, None]
        de[:n] += g * (up - un)
        de[n : 2 * n] -= g * up
        de[2 * n :] += g * un
        touched = True
    if wb > 0 and not stop_gradient:
        gs = dz_same * np.sign(dap)
        gd = dz_diff * np.sign(dan)
        de[:n] += gs + gd
        de[n : 2 * n] -= gs
        de[2 * n :] -= gd
        touched = True

    enc_grads = None
    if touched:
        enc_grads = zero_grads(encoder.params)
        for idx, cache in caches:
            encoder.backward(de[idx], cache, enc_grads)
    return loss, enc_grads, head_grads


@dataclass
class MomentumSGD:
    learning_rate: float
    momentum: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray] | None, prefix: str) -> None:
        """In-place update of the parameters that received a gradient."""
        if grads is None:
            return
        for k, g in grads.items():
            key = prefix + k
            v = self.velocity.get(key)
            v = -self.learning_rate * g if v is None else self.momentum * v - self.learning_rate * g
            self.velocity[key] = v
            params[k] = params[k] + v


# ---------------------------------------------------------------------------
# triplet assembly


@dataclass(frozen=True)
class SegmentRef:
    track: str
    version: str
    index: int

    @property
    def relpath(self) -> str:
        return segment_relpath(self.track, self.version, self.index)

    def __str__(self) -> str:
        return f"{self.track}/{self.version}/segment{self.index:02d}"


@dataclass(frozen=True)
class VersionInfo:
    n_segments: int
    time_shift: float = 0.0
    tempo_factor: float = 1.0
    pitch_shift: int = 0


@dataclass(frozen=True)
class Triplet:
    """``positive_shift`` semitones move the positive into the anchor's key."""

    anchor: SegmentRef
    positive: SegmentRef
    negative: SegmentRef
    positive_shift: int = 0

    def __post_init__(self):
        if self.anchor.track != self.positive.track:
            raise ValueError("anchor and positive must come from the same track")
        if self.anchor.track == self.negative.track:
            raise ValueError("negative must come from a different track")

    def to_dict(self) -> dict:
        return {"anchor": self.anchor.relpath, "positive": self.positive.relpath, "negative": self.negative.relpath,
                "positive_shift": self.positive_shift}


def aligned_index(index: int, src: VersionInfo, dst: VersionInfo, window_seconds: float = 10.0) -> int:
    """Segment of ``dst`` covering the centre of segment ``index`` of ``src``.

    A version places original time ``t`` at ``t / tempo + time_shift``, so
    with unit tempo this shifts the index by ``round(shift / window)``.
    """
    centre = (index + 0.5) * window_seconds
    t = (centre - src.time_shift) * src.tempo_factor
    return int(math.floor((t / dst.tempo_factor + dst.time_shift) / window_seconds))


Corpus = Mapping[str, Mapping[str, VersionInfo]]


def build_triplets(corpus: Corpus, rng: np.random.Generator, visits_per_track: int = 4,
                   window_seconds: float = 10.0, max_tries: int = 20) -> list[Triplet]:
    """One epoch of triplets: every usable track is anchored ``visits_per_track`` times."""
    tracks = sorted(corpus)
    usable = []
    for t in tracks:
        versions = {v: info for v, info in corpus[t].items() if info.n_segments > 0}
        if len(versions) < 2:
            log.warning("track %s has a single version; skipped", t)
        else:
            usable.append(t)
    if len(tracks) < 2:
        log.warning("need at least two tracks to draw negatives; no triplets")
        return []
    all_segments = [(t, v, i) for t in tracks for v in sorted(corpus[t]) for i in range(corpus[t][v].n_segments)]
    out = []
    for _ in range(visits_per_track):
        for t in usable:
            versions = sorted(v for v, info in corpus[t].items() if info.n_segments > 0)
            negatives = [s for s in all_segments if s[0] != t]
            if not negatives:
                continue
            for _ in range(max_tries):
                va = versions[int(rng.integers(len(versions)))]
                others = [v for v in versions if v != va]
                vp = others[int(rng.integers(len(others)))]
                ia = int(rng.integers(corpus[t][va].n_segments))
                ip = aligned_index(ia, corpus[t][va], corpus[t][vp], window_seconds)
                if 0 <= ip < corpus[t][vp].n_segments:
                    neg = negatives[int(rng.integers(len(negatives)))]
                    shift = corpus[t][va].pitch_shift - corpus[t][vp].pitch_shift
                    out.append(Triplet(SegmentRef(t, va, ia), SegmentRef(t, vp, ip), SegmentRef(*neg), shift))
                    break
    return out


@dataclass
class TripletSampler:
    """Fresh triplets every epoch from a dedicated random stream."""

    corpus: Corpus
    seed: int = 0
    visits_per_track: int = 4
    window_seconds: float = 10.0

    def __call__(self, epoch: int) -> list[Triplet]:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(1, epoch))))
        return build_triplets(self.corpus, rng, self.visits_per_track, self.window_seconds)


def write_triplets_jsonl(path, triplets: Sequence[Triplet]) -> None:
    with open(path, "w") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# training


def _shifted(frames, k):
    return transpose_stack(frames, int(k)) if k else frames


@dataclass
class TrainState:
    encoder: EncoderNet
    head: PairClassifierHead
    config: TrainConfig
    optimizer: MomentumSGD
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def model(self) -> SimilarityModel:
        return SimilarityModel(self.encoder, self.head, self.config.key_search)


def init_state(config: TrainConfig, store: Mapping | None = None, in_dim: int = ENCODER_DIM) -> TrainState:
    config.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(0,))))
    encoder = EncoderNet.init(rng, in_dim)
    head = PairClassifierHead.init(rng, encoder.out_dim)
    if store:
        keys = sorted(store, key=str)
        encoder.set_normalization(np.concatenate([_as_frames(store[k]) for k in keys]))
    return TrainState(encoder, head, config, MomentumSGD(config.learning_rate, config.momentum))


def train(triplets: Sequence[Triplet] | Callable[[int], Sequence[Triplet]], store: Mapping, config: TrainConfig,
          state: TrainState | None = None, epochs: int | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Minimise the triplet + BCE objective with momentum SGD.

    ``triplets`` is either a fixed list used every epoch or a callable
    returning the triplets for a given epoch number.  Training resumes from
    ``state`` when given; ``epochs`` defaults to the remaining
    ``config.epochs``.
    """
    config.validate()
    state = state or init_state(config, store)
    sampler = triplets if callable(triplets) else (lambda epoch: triplets)
    stop = state.epoch + (config.epochs - state.epoch if epochs is None else epochs)
    if not callable(triplets) and not triplets:
        raise ValueError("no triplets to train on")
    while state.epoch < stop:
        epoch_triplets = list(sampler(state.epoch))
        if not epoch_triplets:
            raise ValueError(f"no triplets for epoch {state.epoch}")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(2, state.epoch))))
        order = rng.permutation(len(epoch_triplets))
        sums = np.zeros(3)
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [epoch_triplets[i] for i in order[start : start + config.batch_size]]
            shift_a = np.zeros(len(batch), dtype=int)
            shift_n = np.zeros(len(batch), dtype=int)
            if config.transpose_range:
                r = config.transpose_range
                shift_a = rng.integers(-r, r + 1, len(batch))
                shift_n = rng.integers(-r, r + 1, len(batch))
            shift_p = shift_a + (np.array([t.positive_shift for t in batch]) if config.align_positive_key else 0)
            seqs = [[_shifted(store[getattr(t, role)], k) for t, k in zip(batch, shifts)]
                    for role, shifts in (("anchor", shift_a), ("positive", shift_p), ("negative", shift_n))]
            if config.tempo_jitter:
                span = np.log1p(config.tempo_jitter)
                seqs = [[stretch_stack(f, a) for f, a in zip(group, np.exp(rng.uniform(-span, span, len(group))))]
                        for group in seqs]
            loss, g_enc, g_head = batch_loss_and_grads(state.encoder, state.head, *seqs, config)
            bad = not math.isfinite(loss.total) or any(
                not np.all(np.isfinite(g)) for grads in (g_enc, g_head) if grads for g in grads.values())
            if bad:
                raise TrainingDiverged(
                    f"non-finite loss or gradient at epoch {state.epoch} step {step}: "
                    f"triplet={loss.triplet} bce={loss.bce}; last epochs: {state.history[-3:]}")
            state.optimizer.step(state.encoder.params, g_enc, "encoder.")
            state.optimizer.step(state.head.params, g_head, "head.")
            sums += np.array([loss.triplet, loss.bce, loss.total]) * len(batch)
        sums /= len(epoch_triplets)
        state.history.append({"epoch": state.epoch, "triplet": float(sums[0]), "bce": float(sums[1]),
                              "total": float(sums[2])})
        state.epoch += 1
        if on_epoch:
            on_epoch(state)
    return state


# ---------------------------------------------------------------------------
# checkpoints: binary tensor container plus a JSON sidecar

_CK_MAGIC = b"MSCK"
_CK_VERSION = 1


def _tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {"norm.mean": state.encoder.in_mean, "norm.std": state.encoder.in_std}
    out.update({"encoder." + k: v for k, v in state.encoder.params.items()})
    out.update({"head." + k: v for k, v in state.head.params.items()})
    out.update({"opt." + k: v for k, v in state.optimizer.velocity.items()})
    return out


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<4sBI", _CK_MAGIC, _CK_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<HB", len(key), arr.ndim) + key)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 13 or data[:4] != _CK_MAGIC:
        raise CheckpointError("not a melodysim checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    _, version, count = struct.unpack_from("<4sBI", body, 0)
    if version != _CK_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 9
    out = {}
    try:
        for _ in range(count):
            klen, ndim = struct.unpack_from("<HB", body, pos)
            pos += 3
            name = body[pos : pos + klen].decode()
            pos += klen
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


def save_checkpoint(path, state: TrainState) -> None:
    """Writes ``path`` (tensors) and ``path + '.json'`` (config, epoch, losses)."""
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(encode_tensors(_tensors(state)))
    side = {"format": "melodysim-checkpoint", "version": _CK_VERSION, "epoch": state.epoch,
            "config": asdict(state.config), "history": state.history,
            "architecture": {"in_dim": state.encoder.in_dim, "width": state.encoder.out_dim,
                             "blocks": state.encoder.n_blocks, "kernel": state.encoder.params["stem.w"].shape[0],
                             "head_hidden": state.head.params["fc1.w"].shape[1]}}
    with open(path + ".json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> TrainState:
    path = str(path)
    with open(path, "rb") as fh:
        tensors = decode_tensors(fh.read())
    try:
        with open(path + ".json") as fh:
            side = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"missing or unreadable sidecar {path}.json: {exc}") from exc
    config = TrainConfig.from_dict(side["config"])
    enc = {k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")}
    head = {k[5:]: v for k, v in tensors.items() if k.startswith("head.")}
    head["fc2.b"] = head["fc2.b"].reshape(())
    vel = {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}
    if "head.fc2.b" in vel:
        vel["head.fc2.b"] = vel["head.fc2.b"].reshape(())
    encoder = EncoderNet(enc, tensors["norm.mean"], tensors["norm.std"])
    opt = MomentumSGD(config.learning_rate, config.momentum, vel)
    return TrainState(encoder, PairClassifierHead(head), config, opt, int(side["epoch"]), list(side["history"]))


def write_loss_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,triplet,bce,total\n")
        for h in history:
            fh.write(f"{h['epoch']},{h['triplet']:.8f},{h['bce']:.8f},{h['total']:.8f}\n")
