"""Corpus ingestion, evaluation-set loaders and sentence-pair sampling.

Corpus files hold one sentence per line; a blank line ends a document.
Text is NFC-normalised and, for uncased corpora, lowercased with
``str.lower`` (no accent stripping, so Twi letters such as ɔ and ɛ survive).
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

Casing = Literal["cased", "uncased"]


class CorpusError(ValueError):
    """Malformed input data (bad encoding, parse or validation failure)."""


def normalize_text(text: str, casing: Casing = "cased") -> str:
    text = unicodedata.normalize("NFC", text)
    if casing == "uncased":
        # lowercasing can produce decomposed sequences (e.g. U+0130)
        text = unicodedata.normalize("NFC", text.lower())
    elif casing != "cased":
        raise ValueError(f"casing must be 'cased' or 'uncased', got {casing!r}")
    return text


@dataclass(frozen=True)
class Corpus:
    documents: tuple[tuple[str, ...], ...]
    casing_policy: Casing = "cased"
    source_name: str = ""

    def __post_init__(self):
        for doc in self.documents:
            if not doc:
                raise CorpusError("empty document")
            for s in doc:
                if not s:
                    raise CorpusError("empty sentence")

    @classmethod
    def from_documents(cls, documents: Iterable[Iterable[str]], casing: Casing = "cased",
                       source_name: str = "") -> "Corpus":
        docs = []
        for doc in documents:
            sents = tuple(normalize_text(s, casing).strip() for s in doc)
            sents = tuple(s for s in sents if s)
            if sents:
                docs.append(sents)
        return cls(tuple(docs), casing, source_name)

    @classmethod
    def from_sentences(cls, sentences: Iterable[str], casing: Casing = "cased",
                       source_name: str = "") -> "Corpus":
        return cls.from_documents([list(sentences)], casing, source_name)

    @property
    def sentences(self) -> list[str]:
        return [s for doc in self.documents for s in doc]

    def __len__(self) -> int:
        return sum(len(d) for d in self.documents)

    def to_text(self) -> str:
        """Serialise back to the on-disk corpus format."""
        return "\n\n".join("\n".join(doc) for doc in self.documents) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _read_utf8(path) -> str:
    raw = Path(path).read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: invalid UTF-8 at byte offset {exc.start}") from exc


def load_corpus(path, casing_policy: Casing = "cased") -> Corpus:
    text = _read_utf8(path)
    documents: list[list[str]] = []
    current: list[str] = []
    for line in text.split("\n"):
        line = line.rstrip()
        if not line:
            if current:
                documents.append(current)
                current = []
            continue
        current.append(line)
    if current:
        documents.append(current)
    return Corpus.from_documents(documents, casing_policy, source_name=str(path))


def split_train_valid(corpus: Corpus, valid_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Split at document granularity; the validation side gets round(n * fraction) documents."""
    if not 0 < valid_fraction < 1:
        raise ValueError("valid_fraction must lie in (0, 1)")
    n = len(corpus.documents)
    n_valid = int(round(n * valid_fraction))
    if n >= 2:
        n_valid = min(max(n_valid, 1), n - 1)
    if n_valid == 0 or n_valid == n:
        raise ValueError(f"cannot split {n} document(s) with fraction {valid_fraction} into two non-empty parts")
    perm = np.random.default_rng(seed).permutation(n)
    valid_idx = sorted(perm[:n_valid])
    train_idx = sorted(perm[n_valid:])
    mk = lambda idx: Corpus(tuple(corpus.documents[i] for i in idx), corpus.casing_policy, corpus.source_name)
    return mk(train_idx), mk(valid_idx)


# -- next-sentence pairs ----------------------------------------------------------


@dataclass(frozen=True)
class SentencePair:
    sentence_a: str
    sentence_b: str
    is_next: bool


def sample_sentence_pairs(corpus: Corpus, count: int, positive_fraction: float = 0.5,
                          seed: int = 0) -> list[SentencePair]:
    """Draw ``count`` pairs, exactly ``round(count * positive_fraction)`` of them adjacent.

    Negatives take sentence b from a different document; with a single
    document they take a non-adjacent sentence from the same one.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if not 0 <= positive_fraction <= 1:
        raise ValueError("positive_fraction must lie in [0, 1]")
    docs = corpus.documents
    adjacent = [(d, i) for d, doc in enumerate(docs) for i in range(len(doc) - 1)]
    n_pos = int(round(count * positive_fraction))
    if n_pos and not adjacent:
        raise ValueError("no document has two sentences; positive pairs are impossible")
    all_pos = [(d, i) for d, doc in enumerate(docs) for i in range(len(doc))]
    n_neg = count - n_pos
    if n_neg and len(docs) == 1 and len(docs[0]) < 3:
        raise ValueError("a single document needs at least 3 sentences to form negative pairs")

    rng = np.random.default_rng(seed)
    labels = np.array([True] * n_pos + [False] * n_neg)
    rng.shuffle(labels)
    pairs = []
    for is_next in labels:
        if is_next:
            d, i = adjacent[rng.integers(len(adjacent))]
            pairs.append(SentencePair(docs[d][i], docs[d][i + 1], True))
            continue
        d, i = all_pos[rng.integers(len(all_pos))]
        if len(docs) > 1:
            od = int(rng.integers(len(docs) - 1))
            od += od >= d
            j = int(rng.integers(len(docs[od])))
            pairs.append(SentencePair(docs[d][i], docs[od][j], False))
        else:
            doc = docs[0]
            choices = [j for j in range(len(doc)) if j != i + 1 and j != i]
            while not choices:
                i = int(rng.integers(len(doc)))
                choices = [j for j in range(len(doc)) if j != i + 1 and j != i]
            j = choices[rng.integers(len(choices))]
            pairs.append(SentencePair(doc[i], doc[j], False))
    return pairs


# -- evaluation datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class WordSimDataset:
    rows: tuple[tuple[str, str, float], ...]

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class SentimentDataset:
    rows: tuple[tuple[str, str], ...]

    LABELS = ("negative", "positive")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def texts(self) -> list[str]:
        return [t for t, _ in self.rows]

    @property
    def labels(self) -> list[str]:
        return [lab for _, lab in self.rows]


def _data_lines(path):
    for lineno, line in enumerate(_read_utf8(path).split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        yield lineno, line


def load_wordsim(path) -> WordSimDataset:
    rows = []
    seen = set()
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) != 3:
            raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
        w1, w2, raw = (c.strip() for c in cols)
        try:
            score = float(raw)
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: score {raw!r} is not a number") from None
        if not 0 <= score <= 10:
            raise CorpusError(f"{path}:{lineno}: score {score} outside [0, 10]")
        key = frozenset((w1, w2)) if w1 != w2 else (w1,)
        if key in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate pair ({w1}, {w2})")
        seen.add(key)
        rows.append((normalize_text(w1), normalize_text(w2), score))
    return WordSimDataset(tuple(rows))


def load_sentiment(path) -> SentimentDataset:
    rows = []
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) != 2:
            raise CorpusError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
        text, label = cols[0].strip(), cols[1].strip().lower()
        if label not in SentimentDataset.LABELS:
            raise CorpusError(f"{path}:{lineno}: label {label!r} is not positive/negative")
        if not text:
            raise CorpusError(f"{path}:{lineno}: empty text")
        rows.append((normalize_text(text), label))
    if {lab for _, lab in rows} != set(SentimentDataset.LABELS):
        raise CorpusError(f"{path}: both positive and negative labels are required")
    return SentimentDataset(tuple(rows))


DATA_DIR = Path(__file__).parent / "data"


def bundled(name: str) -> Path:
    """Path of a data file shipped with the package (e.g. ``"toy_twi.txt"``)."""
    path = DATA_DIR / name
    if not path.exists():
        raise FileNotFoundError(path)
    return path
