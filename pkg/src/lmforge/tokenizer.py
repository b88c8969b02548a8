"""WordPiece and BPE subword tokenizers: training, encoding, decoding, file I/O.

Both trainers learn merges the same way: count adjacent symbol pairs inside
words, merge the most frequent pair (ties go to the lexicographically
smallest ``(left, right)``), repeat. They differ in how a word is split into
initial symbols and how encoding works:

* WordPiece marks non-initial symbols with ``##`` and encodes by greedy
  longest-match-first against the vocabulary.
* BPE marks the final symbol with ``</w>`` and encodes by replaying the
  ranked merge list.

Special tokens always take ids 0-4 in the order PAD, UNK, CLS/BOS, SEP/EOS, MASK.
"""

from __future__ import annotations

import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Corpus

DEFAULT_WORDPIECE_VOCAB = 30000
DEFAULT_BPE_VOCAB = 52000
END_OF_WORD = "</w>"
CONTINUATION = "##"


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def pre_tokenize(text: str) -> list[str]:
    """Whitespace split, then every punctuation character becomes its own word."""
    words = []
    for chunk in text.split():
        buf = []
        for ch in chunk:
            if _is_punctuation(ch):
                if buf:
                    words.append("".join(buf))
                    buf = []
                words.append(ch)
            else:
                buf.append(ch)
        if buf:
            words.append("".join(buf))
    return words


@dataclass
class Encoding:
    ids: list[int]
    tokens: list[str]
    attention_mask: list[int]
    segment_ids: list[int] | None = None
    special_tokens_mask: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


class Tokenizer:
    """Shared encode/decode plumbing; see :class:`WordPieceTokenizer` and :class:`BpeTokenizer`."""

    kind = ""
    special_tokens: tuple[str, ...] = ()

    def __init__(self, vocab: Sequence[str], lowercase: bool = False):
        self.vocab = list(vocab)
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        if len(self.token_to_id) != len(self.vocab):
            raise ValueError("duplicate tokens in vocabulary")
        if tuple(self.vocab[:5]) != self.special_tokens:
            raise ValueError(f"vocabulary must start with special tokens {self.special_tokens}")
        self.lowercase = lowercase
        self._special_re = re.compile("(" + "|".join(re.escape(s) for s in self.special_tokens) + ")")

    # ids of the fixed special layout
    pad_id, unk_id, cls_id, sep_id, mask_id = range(5)

    @property
    def mask_token(self) -> str:
        return self.special_tokens[4]

    @property
    def unk_token(self) -> str:
        return self.special_tokens[1]

    @property
    def num_special(self) -> int:
        return len(self.special_tokens)

    def __len__(self) -> int:
        return len(self.vocab)

    def mask_token_id(self) -> int:
        return self.mask_id

    def vocab_size(self) -> int:
        return len(self.vocab)

    def id_to_token(self, i: int) -> str:
        if not 0 <= i < len(self.vocab):
            raise ValueError(f"token id {i} out of range [0, {len(self.vocab)})")
        return self.vocab[i]

    def normalize(self, text: str) -> str:
        text = unicodedata.normalize("NFC", text)
        return text.lower() if self.lowercase else text

    def canonical_text(self, text: str) -> str:
        """The text ``decode(encode(text))`` reproduces: normalised words joined by single spaces."""
        return " ".join(pre_tokenize(self.normalize(text)))

    def tokenize(self, text: str) -> list[str]:
        tokens: list[str] = []
        for piece in self._special_re.split(text):
            if not piece:
                continue
            if piece in self.special_tokens:
                tokens.append(piece)
                continue
            for word in pre_tokenize(self.normalize(piece)):
                tokens.extend(self._tokenize_word(word))
        return tokens

    def _tokenize_word(self, word: str) -> list[str]:
        raise NotImplementedError

    def convert_tokens_to_ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, self.unk_id) for t in tokens]

    def encode(self, text: str, add_special_tokens: bool = True, pair: str | None = None,
               max_length: int | None = None) -> Encoding:
        a = self.convert_tokens_to_ids(self.tokenize(text))
        b = self.convert_tokens_to_ids(self.tokenize(pair)) if pair is not None else None
        if max_length is not None:
            budget = max_length - (self._num_added(b is not None) if add_special_tokens else 0)
            if budget < 0:
                raise ValueError(f"max_length {max_length} cannot hold the special tokens")
            a, b = _truncate_longest_first(a, b, budget)
        ids, segs = self._assemble(a, b) if add_special_tokens else (a + (b or []), [0] * len(a) + [1] * len(b or []))
        special = [1 if i < self.num_special else 0 for i in ids]
        return Encoding(ids=ids, tokens=[self.vocab[i] for i in ids], attention_mask=[1] * len(ids),
                        segment_ids=segs, special_tokens_mask=special)

    def _num_added(self, is_pair: bool) -> int:
        raise NotImplementedError

    def _assemble(self, a, b):
        raise NotImplementedError

    def decode(self, ids: Iterable[int]) -> str:
        raise NotImplementedError

    def display_token(self, token: str) -> str:
        """Surface form of a vocabulary token, without subword markers."""
        return token

    # -- persistence ------------------------------------------------------------

    def save(self, directory) -> list[str]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "vocab.txt").write_text("\n".join(self.vocab) + "\n", encoding="utf-8")
        cfg = {"kind": self.kind, "lowercase": self.lowercase, **self._extra_config()}
        (directory / "tokenizer_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n",
                                                          encoding="utf-8")
        return ["vocab.txt", "tokenizer_config.json"]

    def _extra_config(self) -> dict:
        return {}

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.vocab == other.vocab and self.lowercase == other.lowercase

    __hash__ = None


def _truncate_longest_first(a: list[int], b: list[int] | None, budget: int):
    a, b = list(a), (list(b) if b is not None else None)
    while len(a) + len(b or []) > budget:
        if b is not None and len(b) > len(a):
            b.pop()
        else:
            a.pop()
    return a, b


class WordPieceTokenizer(Tokenizer):
    kind = "wordpiece"
    special_tokens = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

    def __init__(self, vocab: Sequence[str], lowercase: bool = False, max_word_chars: int = 100):
        super().__init__(vocab, lowercase)
        self.max_word_chars = max_word_chars

    def _tokenize_word(self, word: str) -> list[str]:
        if len(word) > self.max_word_chars:
            return [self.unk_token]
        pieces = []
        start = 0
        while start < len(word):
            end = len(word)
            found = None
            while end > start:
                sub = word[start:end]
                if start > 0:
                    sub = CONTINUATION + sub
                if sub in self.token_to_id:
                    found = sub
                    break
                end -= 1
            if found is None:
                return [self.unk_token]
            pieces.append(found)
            start = end
        return pieces

    def _num_added(self, is_pair: bool) -> int:
        return 3 if is_pair else 2

    def _assemble(self, a, b):
        ids = [self.cls_id] + a + [self.sep_id]
        segs = [0] * len(ids)
        if b is not None:
            ids += b + [self.sep_id]
            segs += [1] * (len(b) + 1)
        return ids, segs

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        for i in ids:
            tok = self.id_to_token(int(i))
            if int(i) < self.num_special:
                continue
            if tok.startswith(CONTINUATION) and out:
                out[-1] += tok[len(CONTINUATION):]
            else:
                out.append(tok[len(CONTINUATION):] if tok.startswith(CONTINUATION) else tok)
        return " ".join(out)

    def display_token(self, token: str) -> str:
        return token[len(CONTINUATION):] if token.startswith(CONTINUATION) else token

    def _extra_config(self) -> dict:
        return {"max_word_chars": self.max_word_chars}


class BpeTokenizer(Tokenizer):
    kind = "bpe"
    special_tokens = ("<pad>", "<unk>", "<s>", "</s>", "<mask>")

    def __init__(self, vocab: Sequence[str], merges: Sequence[tuple[str, str]], lowercase: bool = False):
        super().__init__(vocab, lowercase)
        self.merges = [tuple(m) for m in merges]
        self.ranks = {m: r for r, m in enumerate(self.merges)}
        if len(self.ranks) != len(self.merges):
            raise ValueError("duplicate pairs in merge list")
        self._cache: dict[str, tuple[str, ...]] = {}

    @property
    def bos_id(self) -> int:
        return self.cls_id

    @property
    def eos_id(self) -> int:
        return self.sep_id

    def _tokenize_word(self, word: str) -> list[str]:
        cached = self._cache.get(word)
        if cached is None:
            cached = tuple(self._apply_merges(_bpe_symbols(word)))
            self._cache[word] = cached
        return [t if t in self.token_to_id else self.unk_token for t in cached]

    def _apply_merges(self, symbols: list[str]) -> list[str]:
        while len(symbols) > 1:
            best = None
            for pair in zip(symbols, symbols[1:]):
                r = self.ranks.get(pair)
                if r is not None and (best is None or r < best[0]):
                    best = (r, pair)
            if best is None:
                break
            symbols = _merge_symbols(symbols, best[1], best[1][0] + best[1][1])
        return symbols

    def _num_added(self, is_pair: bool) -> int:
        return 4 if is_pair else 2

    def _assemble(self, a, b):
        ids = [self.bos_id] + a + [self.eos_id]
        if b is not None:
            ids += [self.eos_id] + b + [self.eos_id]
        return ids, [0] * len(ids)

    def decode(self, ids: Iterable[int]) -> str:
        parts = []
        for i in ids:
            tok = self.id_to_token(int(i))
            if int(i) < self.num_special:
                continue
            parts.append(tok.replace(END_OF_WORD, " "))
        return " ".join("".join(parts).split())

    def display_token(self, token: str) -> str:
        return token.replace(END_OF_WORD, "")

    def save(self, directory) -> list[str]:
        names = super().save(directory)
        lines = ["#version: 0.2"] + [f"{l} {r}" for l, r in self.merges]
        (Path(directory) / "merges.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return names + ["merges.txt"]


def _merge_symbols(symbols: list[str], pair: tuple[str, str], merged: str) -> list[str]:
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def _wordpiece_symbols(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + c for c in word[1:]]


def _bpe_symbols(word: str) -> list[str]:
    return list(word[:-1]) + [word[-1] + END_OF_WORD]


def _wordpiece_merge(left: str, right: str) -> str:
    return left + right[len(CONTINUATION):]


def _bpe_merge(left: str, right: str) -> str:
    return left + right


@dataclass
class MergeTrace:
    """Trainer output: learned merges and each training word's final segmentation."""

    alphabet: list[str]
    merges: list[tuple[str, str]]
    new_tokens: list[str]
    segmentations: dict[str, list[str]]


def learn_merges(word_counts: dict[str, int], split, join, alphabet: list[str], num_merges: int,
                 min_frequency: int = 2) -> MergeTrace:
    """Greedy pair-merge learning shared by both trainers.

    ``split`` maps a word to its initial symbols, ``join`` maps a pair to the
    merged symbol. Stops after ``num_merges`` merges or when the best pair
    occurs fewer than ``min_frequency`` times.
    """
    words = sorted(word_counts)
    freqs = [word_counts[w] for w in words]
    states = [split(w) for w in words]
    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = {}
    for idx, syms in enumerate(states):
        for p in zip(syms, syms[1:]):
            pair_counts[p] += freqs[idx]
            where.setdefault(p, set()).add(idx)

    merges: list[tuple[str, str]] = []
    new_tokens: list[str] = []
    known = set(alphabet)
    while len(merges) < num_merges and pair_counts:
        best, count = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < max(1, min_frequency):
            break
        merged = join(*best)
        merges.append(best)
        if merged not in known:
            known.add(merged)
            new_tokens.append(merged)
        for idx in sorted(where.pop(best, ())):
            old = states[idx]
            f = freqs[idx]
            for p in zip(old, old[1:]):
                pair_counts[p] -= f
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                s = where.get(p)
                if s is not None:
                    s.discard(idx)
            new = _merge_symbols(old, best, merged)
            states[idx] = new
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                where.setdefault(p, set()).add(idx)
        pair_counts.pop(best, None)
    return MergeTrace(alphabet, merges, new_tokens, dict(zip(words, states)))


def _word_counts(corpus: Corpus | Iterable[str]) -> Counter:
    sentences = corpus.sentences if isinstance(corpus, Corpus) else list(corpus)
    counts: Counter = Counter()
    for s in sentences:
        counts.update(pre_tokenize(unicodedata.normalize("NFC", s)))
    return counts


def _lowercase_of(corpus, lowercase):
    if lowercase is None:
        return isinstance(corpus, Corpus) and corpus.casing_policy == "uncased"
    return lowercase


def _prepare_counts(corpus, lowercase):
    counts = _word_counts(corpus)
    if lowercase:
        lowered: Counter = Counter()
        for w, c in counts.items():
            lowered[w.lower()] += c
        counts = lowered
    if not counts:
        raise ValueError("cannot train a tokenizer on an empty corpus")
    return counts


def train_wordpiece(corpus: Corpus | Iterable[str], vocab_size: int = DEFAULT_WORDPIECE_VOCAB,
                    min_frequency: int = 2, lowercase: bool | None = None,
                    return_trace: bool = False):
    """Train a WordPiece vocabulary.

    The alphabet holds every corpus character both word-initially and with the
    ``##`` prefix, so only characters never seen in training map to UNK.
    """
    lowercase = _lowercase_of(corpus, lowercase)
    counts = _prepare_counts(corpus, lowercase)
    chars = sorted({c for w in counts for c in w})
    alphabet = sorted(chars + [CONTINUATION + c for c in chars])
    specials = list(WordPieceTokenizer.special_tokens)
    budget = vocab_size - len(specials) - len(alphabet)
    if budget <= 0:
        raise ValueError(f"vocab_size {vocab_size} must exceed {len(specials)} special tokens "
                         f"+ {len(alphabet)} alphabet symbols")
    trace = learn_merges(counts, _wordpiece_symbols, _wordpiece_merge, alphabet, budget, min_frequency)
    tok = WordPieceTokenizer(specials + alphabet + trace.new_tokens, lowercase=lowercase)
    return (tok, trace) if return_trace else tok


def train_bpe(corpus: Corpus | Iterable[str], vocab_size: int = DEFAULT_BPE_VOCAB, min_frequency: int = 2,
              lowercase: bool | None = None, return_trace: bool = False):
    """Train a BPE merge list; at most ``vocab_size - alphabet - specials`` merges are learned."""
    lowercase = _lowercase_of(corpus, lowercase)
    counts = _prepare_counts(corpus, lowercase)
    chars = sorted({c for w in counts for c in w})
    alphabet = sorted(chars + [c + END_OF_WORD for c in chars])
    specials = list(BpeTokenizer.special_tokens)
    budget = vocab_size - len(specials) - len(alphabet)
    if budget <= 0:
        raise ValueError(f"vocab_size {vocab_size} must exceed {len(specials)} special tokens "
                         f"+ {len(alphabet)} alphabet symbols")
    trace = learn_merges(counts, _bpe_symbols, _bpe_merge, alphabet, budget, min_frequency)
    tok = BpeTokenizer(specials + alphabet + trace.new_tokens, trace.merges, lowercase=lowercase)
    return (tok, trace) if return_trace else tok


def train_tokenizer(algo: str, corpus, vocab_size: int | None = None, min_frequency: int = 2,
                    lowercase: bool | None = None) -> Tokenizer:
    if algo == "wordpiece":
        return train_wordpiece(corpus, vocab_size or DEFAULT_WORDPIECE_VOCAB, min_frequency, lowercase)
    if algo == "bpe":
        return train_bpe(corpus, vocab_size or DEFAULT_BPE_VOCAB, min_frequency, lowercase)
    raise ValueError(f"unknown tokenizer algorithm {algo!r}")


def read_vocab(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def read_merges(path) -> list[tuple[str, str]]:
    merges = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
        if not line or (lineno == 1 and line.startswith("#version")):
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'left right'")
        merges.append((parts[0], parts[1]))
    return merges


def load_tokenizer(directory) -> Tokenizer:
    directory = Path(directory)
    cfg_path = directory / "tokenizer_config.json"
    cfg = json.loads(cfg_path.read_text(encoding="utf-8")) if cfg_path.exists() else {}
    kind = cfg.get("kind") or ("bpe" if (directory / "merges.txt").exists() else "wordpiece")
    vocab = read_vocab(directory / "vocab.txt")
    lowercase = bool(cfg.get("lowercase", False))
    if kind == "wordpiece":
        return WordPieceTokenizer(vocab, lowercase=lowercase, max_word_chars=cfg.get("max_word_chars", 100))
    if kind == "bpe":
        return BpeTokenizer(vocab, read_merges(directory / "merges.txt"), lowercase=lowercase)
    raise ValueError(f"{cfg_path}: unknown tokenizer kind {kind!r}")
