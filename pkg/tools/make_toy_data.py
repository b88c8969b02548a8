"""Regenerate the synthetic Twi-style corpora shipped in src/lmforge/data/.

The sentences are template-generated from a small Twi word list; they are
grammatical-looking filler for desk-scale tests, not real corpus text.

    python tools/make_toy_data.py
"""

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "lmforge" / "data"

SUBJECTS = ["Kofi", "Ama", "Kwame", "Akosua", "Yaw", "Abena", "Maame no", "Papa no", "Abofra no",
            "Ɔhene no", "Nnipa no", "Ɔkraman no", "Ɔkra no", "Me", "Yɛn", "Wɔn", "Ɔkyerɛkyerɛfoɔ no",
            "Ɔkuafoɔ no", "Kɔfi ne Ama", "Nkurɔfoɔ no"]
VERBS_OBJ = {
    "di": ["aduane", "fufuo", "bayerɛ", "nkate", "nkwan", "emo", "kwadu"],
    "nom": ["nsuo", "nsã", "mmeɛ", "kookoo"],
    "tɔ": ["kar", "nwoma", "ntoma", "bayerɛ", "sika kɔkɔɔ", "nkwan", "mpa"],
    "tɔn": ["nkate", "ntoma", "emo", "kookoo", "nwoma"],
    "hwɛ": ["ɔsoro", "owia", "bosome", "dua no", "ɛkwan no", "mmofra no"],
    "kenkan": ["nwoma no", "krataa no", "Twerɛ Kronkron no"],
    "twerɛ": ["krataa", "nwoma", "din no"],
    "kɔ": ["fie", "sukuu", "gua so", "kuro no mu", "ahenfie", "asuo ho", "afuo mu"],
    "boa": ["maame no", "abofra no", "ne nua", "ɔkuafoɔ no", "yɛn"],
    "kyerɛ": ["mmofra no", "nkurɔfoɔ no", "ɛkwan no"],
    "dɔ": ["ne maame", "ne papa", "Nyankopɔn", "ne yere", "ne kunu"],
    "frɛ": ["ne nua", "ɔhene no", "Kwame", "Akosua"],
}
MODIFIERS = ["ntɛm", "bio", "paa", "ɛnnɛ", "ɔkyena", "nnɛra", "anɔpa", "anwummerɛ", "daa", "seesei",
             "dwoodwoo", "nyinaa"]
ENDINGS = [".", ".", ".", "?", "!"]


def sentence(rng) -> str:
    subj = SUBJECTS[rng.integers(len(SUBJECTS))]
    verb = sorted(VERBS_OBJ)[rng.integers(len(VERBS_OBJ))]
    obj = VERBS_OBJ[verb][rng.integers(len(VERBS_OBJ[verb]))]
    words = [subj, verb, obj]
    if rng.random() < 0.8:
        words.append(MODIFIERS[rng.integers(len(MODIFIERS))])
    if rng.random() < 0.3:
        words.append(MODIFIERS[rng.integers(len(MODIFIERS))])
    return " ".join(words) + ENDINGS[rng.integers(len(ENDINGS))]


def unique_sentences(rng, n, distinct_slots=False):
    out, seen = [], set()
    while len(out) < n:
        s = sentence(rng)
        if s in seen:
            continue
        words = s.split()
        if distinct_slots:
            # every single-word blank must still identify this sentence
            keys = {(i, tuple(w for j, w in enumerate(words) if j != i), len(words)) for i in range(len(words))}
            if any(k in seen for k in keys):
                continue
            seen.update(keys)
        seen.add(s)
        out.append(s)
    return out


def documents(sentences, rng, lo=3, hi=7):
    docs, i = [], 0
    while i < len(sentences):
        k = int(rng.integers(lo, hi + 1))
        docs.append(sentences[i:i + k])
        i += k
    return docs


def write(path, docs):
    path.write_text("\n\n".join("\n".join(d) for d in docs) + "\n", encoding="utf-8")


def main():
    OUT.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(20211026)
    # 200 physical lines including blank document separators
    sents = unique_sentences(rng, 400)
    docs, lines = [], 0
    i = 0
    while True:
        k = int(rng.integers(3, 8))
        need = k + (1 if docs else 0)
        if lines + need > 200:
            k = 200 - lines - (1 if docs else 0)
            if k <= 0:
                break
            need = k + 1
        docs.append(sents[i:i + k])
        i += k
        lines += need
        if lines == 200:
            break
    write(OUT / "toy_twi.txt", docs)

    rng = np.random.default_rng(64)
    write(OUT / "overfit64.txt", documents(unique_sentences(rng, 64, distinct_slots=True), rng, 8, 8))

    rng = np.random.default_rng(1000)
    write(OUT / "toy_twi_1k.txt", documents(unique_sentences(rng, 1000), rng))


if __name__ == "__main__":
    main()
