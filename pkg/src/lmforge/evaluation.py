"""Fill-mask inference, Spearman correlation, word-similarity and held-out loss evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from .corpus import Corpus, WordSimDataset
from .model import ModelConfig, ModelParameters, forward
from .tokenizer import Tokenizer
from .training import (MaskingPolicy, Schedule, make_batches, make_examples, mean_batch_loss,
                       derive_seed)

MASK_PLACEHOLDER = "[MASK]"


class EvaluationError(RuntimeError):
    """Not enough evaluable data to compute a metric."""


class MaskCountError(ValueError):
    """fill-mask input does not contain exactly one mask token."""


# -- fill-mask ------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskCompletion:
    sequence: str
    token: str
    token_id: int
    score: float


def _softmax64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def fill_mask(params: ModelParameters, config: ModelConfig, tokenizer: Tokenizer, text: str,
              top_k: int = 5) -> list[MaskCompletion]:
    """Top-k completions of the single mask in ``text``.

    ``[MASK]`` is accepted for every tokenizer and mapped to its own mask
    token. Scores are softmax probabilities; ties go to the lower token id.
    """
    if tokenizer.mask_token != MASK_PLACEHOLDER:
        text = text.replace(MASK_PLACEHOLDER, tokenizer.mask_token)
    enc = tokenizer.encode(text)
    positions = [i for i, t in enumerate(enc.ids) if t == tokenizer.mask_id]
    if len(positions) != 1:
        raise MaskCountError(f"text must contain exactly one mask token, found {len(positions)}")
    if top_k < 1:
        raise ValueError("top_k must be positive")
    pos = positions[0]
    ids = np.asarray([enc.ids], dtype=np.int64)
    segs = np.asarray([enc.segment_ids]) if config.num_segment_types else None
    out = forward(params, config, ids, np.ones_like(ids), segs)
    probs = _softmax64(out.mlm_logits.data[0, pos])
    order = np.lexsort((np.arange(probs.size), -probs))[:top_k]
    completions = []
    for tid in order:
        filled = list(enc.ids)
        filled[pos] = int(tid)
        tok = tokenizer.vocab[int(tid)]
        completions.append(MaskCompletion(tokenizer.decode(filled), tok, int(tid), float(probs[tid])))
    return completions


# -- rank correlation ----------------------------------------------------------------------


def average_ranks(xs: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise ValueError("need at least two observations")
    rx, ry = average_ranks(xs), average_ranks(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("spearman_rho is undefined for constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


# -- word similarity -------------------------------------------------------------------------


class VectorSource(Protocol):
    def vector(self, word: str, backoff: bool = True) -> np.ndarray | None: ...


class WordVectors:
    """Plain word -> vector table, e.g. loaded from the embedding text format."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        self.vectors = vectors
        self.dim = len(next(iter(vectors.values()))) if vectors else 0

    def vector(self, word: str, backoff: bool = True) -> np.ndarray | None:
        return self.vectors.get(word)

    @classmethod
    def load(cls, path) -> "WordVectors":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        count, dim = (int(v) for v in lines[0].split())
        vecs = {}
        for lineno, line in enumerate(lines[1:count + 1], start=2):
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values")
            vecs[parts[0]] = np.asarray(parts[1:], dtype=np.float32)
        return cls(vecs)


class TransformerWordVectors:
    """Word vectors from a transformer: mean final hidden state over the word's subword tokens.

    Encoded without special tokens. Words containing an unknown piece count
    as out-of-vocabulary unless ``backoff`` is requested.
    """

    def __init__(self, params: ModelParameters, config: ModelConfig, tokenizer: Tokenizer):
        self.params, self.config, self.tokenizer = params, config, tokenizer

    def vector(self, word: str, backoff: bool = False) -> np.ndarray | None:
        enc = self.tokenizer.encode(word, add_special_tokens=False)
        if not enc.ids:
            return None
        if not backoff and self.tokenizer.unk_id in enc.ids:
            return None
        ids = np.asarray([enc.ids[: self.config.max_positions]], dtype=np.int64)
        out = forward(self.params, self.config, ids, np.ones_like(ids))
        return out.hidden.data[0].mean(axis=0)


@dataclass
class WordSimReport:
    rho: float
    evaluated: int
    skipped: int
    similarities: list[tuple[str, str, float, float | None]] = field(default_factory=list)
    source: str = "static"

    def lines(self) -> list[str]:
        return [f"rho\t{self.rho:.6f}", f"pairs_evaluated\t{self.evaluated}",
                f"pairs_skipped\t{self.skipped}", f"vector_source\t{self.source}"]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def eval_wordsim(source: VectorSource, dataset: WordSimDataset, oov_policy: str | None = None) -> WordSimReport:
    """Spearman rho between cosine similarities and human scores.

    ``oov_policy`` is ``"skip"`` (drop pairs with a missing vector) or
    ``"subword-backoff"`` (ask the source for a subword-composed vector).
    Defaults to backoff for static embeddings and skip for transformers.
    """
    if oov_policy is None:
        oov_policy = "skip" if isinstance(source, TransformerWordVectors) else "subword-backoff"
    if oov_policy not in ("skip", "subword-backoff"):
        raise ValueError(f"unknown oov_policy {oov_policy!r}")
    backoff = oov_policy == "subword-backoff"
    model_sims, human = [], []
    rows = []
    for w1, w2, score in dataset.rows:
        v1, v2 = source.vector(w1, backoff=backoff), source.vector(w2, backoff=backoff)
        if v1 is None or v2 is None:
            rows.append((w1, w2, score, None))
            continue
        sim = cosine(v1, v2)
        rows.append((w1, w2, score, sim))
        model_sims.append(sim)
        human.append(score)
    if len(model_sims) < 2:
        raise EvaluationError(f"only {len(model_sims)} evaluable pairs")
    kind = "transformer" if isinstance(source, TransformerWordVectors) else "static"
    return WordSimReport(spearman_rho(model_sims, human), len(model_sims), len(dataset) - len(model_sims),
                         rows, kind)


# -- held-out loss ------------------------------------------------------------------------------


class LossBreakdown(NamedTuple):
    mlm: float
    nsp: float
    total: float


def eval_heldout_loss(params: ModelParameters, config: ModelConfig, tokenizer: Tokenizer, corpus: Corpus,
                      policy: MaskingPolicy = MaskingPolicy(), seed: int = 0, batch_size: int = 16,
                      max_seq: int = 64) -> LossBreakdown:
    """Mean masked-batch losses over one deterministic pass of ``corpus``."""
    schedule = Schedule(batch_size=batch_size, max_seq=max_seq, seed=seed, policy=policy)
    examples = make_examples(corpus, config, None, 0.5, derive_seed(seed, 0))
    batches = make_batches(examples, tokenizer, schedule, derive_seed(seed, 4))
    return LossBreakdown(*mean_batch_loss(params, config, batches))


def write_report(path, metrics: Sequence[tuple[str, object]]) -> None:
    """Write ``metric<TAB>value`` lines."""
    Path(path).write_text("".join(f"{k}\t{v}\n" for k, v in metrics), encoding="utf-8")
