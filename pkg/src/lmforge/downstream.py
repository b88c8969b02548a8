"""Sentence embeddings + k-nearest-neighbour sentiment classification over repeated random splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import SentimentDataset
from .model import ModelConfig, ModelParameters, forward
from .tokenizer import Tokenizer
from .training import derive_seed


class UnbalancedDatasetError(ValueError):
    """Strict mode needs equally many samples per label (and at least 8 in total)."""


@dataclass(frozen=True)
class SentenceEmbedding:
    vector: np.ndarray
    text: str
    pooling: str


def sentence_embedding(params: ModelParameters, config: ModelConfig, tokenizer: Tokenizer, text: str,
                       pooling: str = "mean") -> SentenceEmbedding:
    """``mean``: average final hidden state over non-special tokens; ``cls``: first position."""
    if not text or not text.strip():
        raise ValueError("cannot embed empty text")
    if pooling not in ("mean", "cls"):
        raise ValueError(f"unknown pooling {pooling!r}")
    enc = tokenizer.encode(text, max_length=config.max_positions)
    ids = np.asarray([enc.ids], dtype=np.int64)
    segs = np.zeros_like(ids) if config.num_segment_types else None
    hidden = forward(params, config, ids, np.ones_like(ids), segs).hidden.data[0]
    if pooling == "cls":
        vec = hidden[0]
    else:
        keep = np.asarray(enc.special_tokens_mask) == 0
        vec = hidden[keep].mean(axis=0) if keep.any() else hidden.mean(axis=0)
    return SentenceEmbedding(vec.astype(np.float32), text, pooling)


def _distances(train: np.ndarray, query: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        return np.linalg.norm(train - query[None, :], axis=1)
    if metric == "cosine":
        tn = np.linalg.norm(train, axis=1)
        qn = np.linalg.norm(query)
        denom = np.where(tn * qn == 0, 1.0, tn * qn)
        return 1.0 - (train @ query) / denom
    raise ValueError(f"unknown metric {metric!r}")


def knn_classify(train: Sequence[tuple[np.ndarray, str]], query: np.ndarray, k: int = 5,
                 metric: str = "cosine") -> str:
    """Majority label of the k nearest training vectors.

    Distance ties keep training-set order; a vote tie goes to the label of
    the single nearest neighbour.
    """
    if not train:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must lie in [1, {len(train)}]")
    vecs = np.stack([np.asarray(v, dtype=np.float64) for v, _ in train])
    labels = [lab for _, lab in train]
    d = _distances(vecs, np.asarray(query, dtype=np.float64), metric)
    nearest = np.argsort(d, kind="stable")[:k]
    votes: dict[str, int] = {}
    for i in nearest:
        votes[labels[i]] = votes.get(labels[i], 0) + 1
    best = max(votes.values())
    winners = {lab for lab, v in votes.items() if v == best}
    if len(winners) == 1:
        return winners.pop()
    return labels[nearest[0]]


@dataclass
class ExperimentReport:
    accuracies: list[float]
    train_size: int
    test_size: int
    seed: int
    k: int
    metric: str
    stratified: bool
    per_trial_seeds: list[int] = field(default_factory=list, repr=False)

    @property
    def trials(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def min(self) -> float:
        return float(np.min(self.accuracies))

    @property
    def max(self) -> float:
        return float(np.max(self.accuracies))

    def tsv(self) -> str:
        rows = ["trial\taccuracy"]
        rows += [f"{i}\t{a:.6f}" for i, a in enumerate(self.accuracies, start=1)]
        rows.append(f"mean/min/max\t{self.mean:.6f}/{self.min:.6f}/{self.max:.6f}")
        return "\n".join(rows) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.tsv(), encoding="utf-8")


def split_sizes(labels: Sequence[str]) -> tuple[int, int]:
    """Train/test sizes: 14/6 for 20 samples, 70/30 (rounded) otherwise."""
    n = len(labels)
    train = int(round(0.7 * n))
    return train, n - train


def _split(labels: np.ndarray, rng: np.random.Generator, stratified: bool) -> tuple[np.ndarray, np.ndarray]:
    n_train, _ = split_sizes(labels)
    if not stratified:
        perm = rng.permutation(labels.size)
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])
    train, test = [], []
    classes = sorted(set(labels.tolist()))
    per_class = n_train // len(classes)
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        train.append(idx[:per_class])
        test.append(idx[per_class:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def knn_trials(vectors: np.ndarray, labels: Sequence[str], trials: int = 50, k: int = 5, seed: int = 0,
               metric: str = "cosine", stratified: bool = True, strict: bool = True) -> ExperimentReport:
    """Repeated random-split kNN accuracy over precomputed vectors.

    Trial ``i`` draws its split from a sub-seed derived from ``(seed, i)``.
    ``strict`` requires a balanced dataset of at least 8 samples.
    """
    labels_arr = np.asarray(labels)
    vectors = np.asarray(vectors)
    if len(vectors) != len(labels_arr):
        raise ValueError("vectors and labels differ in length")
    counts = {c: int((labels_arr == c).sum()) for c in set(labels_arr.tolist())}
    if strict and (len(set(counts.values())) != 1 or len(labels_arr) < 8 or len(counts) < 2):
        raise UnbalancedDatasetError(f"strict mode needs a balanced dataset of at least 8 samples, got {counts}")
    n_train, n_test = split_sizes(labels_arr)
    accs, seeds = [], []
    for t in range(trials):
        sub = derive_seed(seed, t)
        seeds.append(sub)
        tr, te = _split(labels_arr, np.random.default_rng(sub), stratified)
        train = [(vectors[i], labels_arr[i]) for i in tr]
        kk = min(k, len(train))
        correct = sum(knn_classify(train, vectors[i], kk, metric) == labels_arr[i] for i in te)
        accs.append(correct / len(te))
    return ExperimentReport(accs, n_train, n_test, seed, k, metric, stratified, seeds)


def sentiment_experiment(params: ModelParameters, config: ModelConfig, tokenizer: Tokenizer,
                         dataset: SentimentDataset, trials: int = 50, k: int = 5, seed: int = 0,
                         pooling: str = "mean", metric: str = "cosine", stratified: bool = True,
                         strict: bool = True) -> ExperimentReport:
    vectors = np.stack([sentence_embedding(params, config, tokenizer, t, pooling).vector for t in dataset.texts])
    return knn_trials(vectors, dataset.labels, trials, k, seed, metric, stratified, strict)
