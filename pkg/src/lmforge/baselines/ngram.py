"""Word n-gram language model with add-k smoothing.

Each sentence is padded with ``n - 1`` start symbols and one end symbol.
The predicted vocabulary is every training word plus ``<unk>`` and ``</s>``;
the start symbol is only ever context. For a context h,

    P(w | h) = (C(h, w) + k) / (C(h) + k |V|)

where C(h) counts h as a context (followed by anything, end symbol
included), so each conditional distribution sums to one. A context never
seen in training gets the uniform distribution.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable

from ..corpus import Corpus
from ..tokenizer import pre_tokenize

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"


class EvaluationError(ArithmeticError):
    """A held-out event has probability zero (unsmoothed model)."""


def words_of(sentence: str) -> list[str]:
    return pre_tokenize(sentence)


@dataclass
class NGramModel:
    order: int
    add_k: float
    vocab: tuple[str, ...]
    ngram_counts: Counter = field(default_factory=Counter)
    context_counts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self._vocab_set = frozenset(self.vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def map_word(self, w: str) -> str:
        return w if w in self._vocab_set else UNK

    def pad(self, sentence: str | list[str]) -> list[str]:
        ws = words_of(sentence) if isinstance(sentence, str) else list(sentence)
        return [BOS] * (self.order - 1) + [self.map_word(w) for w in ws] + [EOS]

    def prob(self, word: str, context: Iterable[str] = ()) -> float:
        """P(word | last n-1 symbols of context); context is padded with start symbols if short."""
        need = self.order - 1
        ctx = list(context)[-need:] if need else []
        ctx = tuple([BOS] * (need - len(ctx)) + [c if c == BOS else self.map_word(c) for c in ctx])
        w = self.map_word(word)
        c_h = self.context_counts.get(ctx, 0)
        c_hw = self.ngram_counts.get(ctx + (w,), 0)
        denom = c_h + self.add_k * self.vocab_size
        if denom == 0:
            return 1.0 / self.vocab_size
        return (c_hw + self.add_k) / denom

    def distribution(self, context: Iterable[str] = ()) -> dict[str, float]:
        return {w: self.prob(w, context) for w in self.vocab}

    def observed_contexts(self) -> list[tuple[str, ...]]:
        return sorted(self.context_counts)

    def to_json(self) -> str:
        return json.dumps({
            "order": self.order,
            "add_k": self.add_k,
            "vocab": list(self.vocab),
            "ngrams": [[list(k), v] for k, v in sorted(self.ngram_counts.items())],
        }, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "NGramModel":
        d = json.loads(text)
        grams = Counter({tuple(k): v for k, v in d["ngrams"]})
        ctx: Counter = Counter()
        for g, c in grams.items():
            ctx[g[:-1]] += c
        return cls(d["order"], d["add_k"], tuple(d["vocab"]), grams, ctx)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NGramModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _sentences(corpus) -> list[str]:
    return corpus.sentences if isinstance(corpus, Corpus) else list(corpus)


def train_ngram(corpus: Corpus | Iterable[str], n: int, add_k: float = 0.0) -> NGramModel:
    if n < 1:
        raise ValueError("n must be at least 1")
    if add_k < 0:
        raise ValueError("add_k must be non-negative")
    sents = [words_of(s) for s in _sentences(corpus)]
    if not sents:
        raise ValueError("cannot train an n-gram model on an empty corpus")
    words = sorted({w for s in sents for w in s} - {BOS, EOS, UNK})
    model = NGramModel(n, add_k, tuple(words) + (UNK, EOS))
    for s in sents:
        padded = model.pad(s)
        for i in range(n - 1, len(padded)):
            gram = tuple(padded[i - n + 1:i + 1])
            model.ngram_counts[gram] += 1
            model.context_counts[gram[:-1]] += 1
    return model


def sentence_logprob(model: NGramModel, sentence: str | list[str]) -> float:
    """Natural-log probability of the sentence including its end symbol; -inf for a zero-probability event."""
    padded = model.pad(sentence)
    n = model.order
    total = 0.0
    for i in range(n - 1, len(padded)):
        p = model.prob(padded[i], padded[i - n + 1:i] if n > 1 else ())
        if p == 0.0:
            return -math.inf
        total += math.log(p)
    return total


def perplexity(model: NGramModel, corpus: Corpus | Iterable[str]) -> float:
    """exp(-mean log-prob per predicted symbol); each sentence contributes its words plus one end symbol."""
    total, count = 0.0, 0
    for s in _sentences(corpus):
        lp = sentence_logprob(model, s)
        if lp == -math.inf:
            raise EvaluationError(f"zero-probability event in {s!r}; use add_k > 0")
        total += lp
        count += len(words_of(s)) + 1
    if count == 0:
        raise ValueError("empty evaluation corpus")
    return math.exp(-total / count)


def enumerate_sentences(vocab: Iterable[str], max_len: int):
    """All word sequences over ``vocab`` of length 0..max_len (for exhaustive checks)."""
    vocab = list(vocab)
    for length in range(max_len + 1):
        yield from (list(t) for t in product(vocab, repeat=length))
