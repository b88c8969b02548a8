"""Skip-gram with negative sampling over words enriched with hashed character n-grams.

A word's input vector is its own vector plus the mean of the vectors of its
character n-grams (taken from ``<word>`` with lengths ``minn..maxn`` and
hashed with 32-bit FNV-1a into ``buckets`` rows). Out-of-vocabulary words
fall back to the n-gram mean alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..corpus import Corpus
from ..tokenizer import pre_tokenize

log = logging.getLogger(__name__)

FNV_OFFSET = 0x811C9DC5
FNV_PRIME = 0x01000193


def fnv1a_32(text: str) -> int:
    h = FNV_OFFSET
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFF
    return h


def char_ngrams(word: str, minn: int, maxn: int) -> list[str]:
    """Substrings of ``<word>`` with length in [minn, maxn], excluding the whole bracketed word."""
    w = f"<{word}>"
    out = []
    for n in range(minn, maxn + 1):
        for i in range(len(w) - n + 1):
            g = w[i:i + n]
            if g != w:
                out.append(g)
    return out


@dataclass
class StaticEmbeddings:
    dim: int
    words: list[str]
    word_vectors: np.ndarray
    ngram_vectors: np.ndarray
    output_vectors: np.ndarray
    minn: int = 3
    maxn: int = 6
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def buckets(self) -> int:
        return self.ngram_vectors.shape[0]

    def ngram_ids(self, word: str) -> np.ndarray:
        if self.buckets == 0 or self.maxn < self.minn:
            return np.zeros(0, dtype=np.int64)
        return np.asarray([fnv1a_32(g) % self.buckets for g in char_ngrams(word, self.minn, self.maxn)],
                          dtype=np.int64)

    def word_vector(self, word: str) -> np.ndarray:
        """Composed vector; never fails (an OOV word with no n-grams gives zeros)."""
        ids = self.ngram_ids(word)
        sub = self.ngram_vectors[ids].mean(axis=0) if ids.size else np.zeros(self.dim, dtype=np.float32)
        i = self.index.get(word)
        return (self.word_vectors[i] + sub) if i is not None else sub.astype(np.float32)

    def vector(self, word: str, backoff: bool = True) -> np.ndarray | None:
        if word in self.index or backoff:
            return self.word_vector(word)
        return None

    def save_text(self, path) -> None:
        """``count dim`` header, then ``word v1 ... vdim`` per line."""
        lines = [f"{len(self.words)} {self.dim}"]
        for w in self.words:
            lines.append(w + " " + " ".join(f"{x:.6f}" for x in self.word_vector(w)))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def save(self, path) -> None:
        np.savez(path, dim=self.dim, words=np.asarray(self.words), word_vectors=self.word_vectors,
                 ngram_vectors=self.ngram_vectors, output_vectors=self.output_vectors,
                 minn=self.minn, maxn=self.maxn)

    @classmethod
    def load(cls, path) -> "StaticEmbeddings":
        with np.load(path, allow_pickle=False) as z:
            return cls(int(z["dim"]), [str(w) for w in z["words"]], z["word_vectors"], z["ngram_vectors"],
                       z["output_vectors"], int(z["minn"]), int(z["maxn"]))


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def train_static_embeddings(corpus: Corpus, dim: int = 50, window: int = 3, negatives: int = 5, epochs: int = 5,
                            minn: int = 3, maxn: int = 6, buckets: int = 200_000, lr: float = 0.05,
                            seed: int = 0, min_count: int = 1) -> StaticEmbeddings:
    """Skip-gram negative-sampling training; deterministic under ``seed``.

    The learning rate decays linearly to zero over the run. Per-epoch mean
    pair losses are kept in ``epoch_losses``.
    """
    sentences = [pre_tokenize(s) for s in corpus.sentences]
    counts: dict[str, int] = {}
    for s in sentences:
        for w in s:
            counts[w] = counts.get(w, 0) + 1
    words = sorted(w for w, c in counts.items() if c >= min_count)
    if not words:
        raise ValueError("no words to train on")
    index = {w: i for i, w in enumerate(words)}
    rng = np.random.default_rng(seed)
    bound = 1.0 / dim
    emb = StaticEmbeddings(
        dim=dim, words=words,
        word_vectors=rng.uniform(-bound, bound, (len(words), dim)).astype(np.float32),
        ngram_vectors=rng.uniform(-bound, bound, (buckets, dim)).astype(np.float32),
        output_vectors=np.zeros((len(words), dim), dtype=np.float32),
        minn=minn, maxn=maxn,
    )
    ngram_ids = [emb.ngram_ids(w) for w in words]
    freq = np.asarray([counts[w] for w in words], dtype=np.float64) ** 0.75
    noise = freq / freq.sum()
    encoded = [np.asarray([index[w] for w in s if w in index], dtype=np.int64) for s in sentences]
    total_tokens = epochs * sum(len(s) for s in encoded)
    seen = 0
    W, G, O = emb.word_vectors, emb.ngram_vectors, emb.output_vectors

    for epoch in range(epochs):
        loss_sum, pairs = 0.0, 0
        for s in encoded:
            for i, center in enumerate(s):
                alpha = lr * max(1e-4, 1.0 - seen / max(1, total_tokens))
                seen += 1
                ctx = np.concatenate([s[max(0, i - window):i], s[i + 1:i + 1 + window]])
                if ctx.size == 0:
                    continue
                grams = ngram_ids[center]
                h = W[center] + (G[grams].mean(axis=0) if grams.size else 0.0)
                negs = rng.choice(len(words), size=(ctx.size, negatives), p=noise)
                targets = np.concatenate([ctx[:, None], negs], axis=1)
                labels = np.zeros(targets.shape, dtype=np.float32)
                labels[:, 0] = 1.0
                valid = np.ones(targets.shape, dtype=bool)
                valid[:, 1:] = negs != ctx[:, None]
                scores = O[targets] @ h
                sign = np.where(labels == 1.0, 1.0, -1.0)
                loss_sum += float(-(_log_sigmoid(sign * scores) * valid).sum())
                pairs += ctx.size
                g = (_sigmoid(scores) - labels) * valid * alpha
                dh = (g[..., None] * O[targets]).sum(axis=(0, 1))
                np.add.at(O, targets.reshape(-1), -(g.reshape(-1, 1) * h[None, :]).astype(np.float32))
                W[center] -= dh.astype(np.float32)
                if grams.size:
                    np.add.at(G, grams, -(dh / grams.size).astype(np.float32))
        emb.epoch_losses.append(loss_sum / max(1, pairs))
        log.info("embeddings epoch %d: loss %.4f", epoch + 1, emb.epoch_losses[-1])
    return emb
