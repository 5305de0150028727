"""Histogram-based gradient-boosted trees for binary classification.

Features are quantile-binned once; each round fits a depth-limited tree to
the logistic-loss gradients using per-bin gradient/hessian histograms and
Newton leaf values.  A round whose step would raise the training loss is
shrunk until it does not, so the training loss is non-increasing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels

FORMAT = "melodysim-gbdt"
VERSION = 1


class TrainingError(ValueError):
    pass


@dataclass
class BoostConfig:
    rounds: int = 100
    learning_rate: float = 0.1
    n_bins: int = 32
    max_depth: int = 3
    min_samples_leaf: int = 2
    l2: float = 1.0
    seed: int = 0


@dataclass
class Tree:
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def _add_leaf(self, value):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.value) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        for r, x in enumerate(X):
            node = 0
            while self.feature[node] >= 0:
                node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
            out[r] = self.value[node]
        return out

    def scaled(self, factor: float) -> "Tree":
        return Tree(list(self.feature), list(self.threshold), list(self.left), list(self.right),
                    [v * factor for v in self.value])


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def logistic_loss(y: np.ndarray, raw: np.ndarray) -> float:
    # log(1 + e^z) - y z, stable form
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def bin_edges(X: np.ndarray, n_bins: int) -> list[np.ndarray]:
    edges = []
    qs = np.linspace(0, 1, n_bins + 1)[1:-1]
    for col in X.T:
        u = np.unique(col)
        if len(u) <= n_bins:
            e = (u[:-1] + u[1:]) / 2.0
        else:
            e = np.unique(np.quantile(col, qs))
        edges.append(np.asarray(e, dtype=np.float64))
    return edges


def apply_bins(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.int64)
    for f, e in enumerate(edges):
        out[:, f] = np.searchsorted(e, X[:, f], side="left")
    return out


@dataclass
class GradientBoostedTrees:
    config: BoostConfig
    base_score: float = 0.0
    edges: list[np.ndarray] = field(default_factory=list)
    trees: list[Tree] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)

    # -- fitting -----------------------------------------------------------
    def fit(self, X, y) -> "GradientBoostedTrees":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or len(X) != len(y):
            raise TrainingError("X must be (n_samples, n_features) matching y")
        pos = int(y.sum())
        if pos == 0 or pos == len(y):
            raise TrainingError("training data must contain both classes")
        cfg = self.config
        prior = pos / len(y)
        self.base_score = float(np.log(prior / (1 - prior)))
        self.edges = bin_edges(X, cfg.n_bins)
        binned = apply_bins(X, self.edges)
        raw = np.full(len(y), self.base_score)
        self.trees = []
        self.train_loss = [logistic_loss(y, raw)]
        for _ in range(cfg.rounds):
            p = _sigmoid(raw)
            grad = p - y
            hess = np.maximum(p * (1 - p), 1e-12)
            tree = self._grow(binned, grad, hess)
            step = tree.predict(X)
            scale = 1.0
            while scale > 1e-6:
                new_loss = logistic_loss(y, raw + scale * step)
                if new_loss <= self.train_loss[-1]:
                    break
                scale *= 0.5
            else:
                scale = 0.0
                new_loss = self.train_loss[-1]
            if scale != 1.0:
                tree = tree.scaled(scale)
            raw = raw + scale * step
            self.trees.append(tree)
            self.train_loss.append(new_loss)
        return self

    def _grow(self, binned, grad, hess) -> Tree:
        cfg = self.config
        tree = Tree()
        n_bins = max(len(e) for e in self.edges) + 1 if self.edges else 1

        def build(rows, depth):
            G = grad[rows].sum()
            H = hess[rows].sum()
            leaf = -cfg.learning_rate * G / (H + cfg.l2)
            if depth >= cfg.max_depth or len(rows) < 2 * cfg.min_samples_leaf:
                return tree._add_leaf(leaf)
            hist = kernels.build_histograms(binned, grad, hess, rows, n_bins)
            counts = np.zeros((binned.shape[1], n_bins))
            for f in range(binned.shape[1]):
                counts[f] = np.bincount(binned[rows, f], minlength=n_bins)
            parent = G * G / (H + cfg.l2)
            best = (0.0, -1, -1)
            for f in range(binned.shape[1]):
                n_edges = len(self.edges[f])
                if n_edges == 0:
                    continue
                gl = np.cumsum(hist[f, :, 0])[:n_edges]
                hl = np.cumsum(hist[f, :, 1])[:n_edges]
                cl = np.cumsum(counts[f])[:n_edges]
                gr, hr, cr = G - gl, H - hl, len(rows) - cl
                gain = gl * gl / (hl + cfg.l2) + gr * gr / (hr + cfg.l2) - parent
                ok = (cl >= cfg.min_samples_leaf) & (cr >= cfg.min_samples_leaf)
                gain = np.where(ok, gain, -np.inf)
                b = int(np.argmax(gain))
                if gain[b] > best[0] + 1e-12:
                    best = (float(gain[b]), f, b)
            _, f, b = best
            if f < 0:
                return tree._add_leaf(leaf)
            node = tree._add_leaf(0.0)
            tree.feature[node] = f
            tree.threshold[node] = float(self.edges[f][b])
            mask = binned[rows, f] <= b
            left = build(rows[mask], depth + 1)
            right = build(rows[~mask], depth + 1)
            tree.left[node] = left
            tree.right[node] = right
            return node

        build(np.arange(len(grad)), 0)
        return tree

    # -- inference -----------------------------------------------------------
    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        raw = np.full(len(X), self.base_score)
        for t in self.trees:
            raw += t.predict(X)
        return raw

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    # -- serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "config": self.config.__dict__,
            "base_score": self.base_score,
            "bin_edges": [e.tolist() for e in self.edges],
            "trees": [t.__dict__ for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GradientBoostedTrees":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError("not a melodysim boosted-tree document")
        model = cls(BoostConfig(**d["config"]), float(d["base_score"]))
        model.edges = [np.asarray(e, dtype=np.float64) for e in d["bin_edges"]]
        model.trees = [Tree(**t) for t in d["trees"]]
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GradientBoostedTrees":
        return cls.from_dict(json.loads(text))
