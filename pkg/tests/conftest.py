import numpy as np
import pytest

from lmforge.corpus import bundled, load_corpus
from lmforge.model import ModelConfig
from lmforge.tokenizer import train_bpe, train_wordpiece

TINY = dict(hidden_size=64, num_layers=2, num_heads=4, feedforward_size=256, max_positions=64)


def tiny_config(flavor: str, vocab_size: int, **kw) -> ModelConfig:
    return ModelConfig.for_flavor(flavor, vocab_size=vocab_size, **{**TINY, **kw})


@pytest.fixture(scope="session")
def toy_corpus():
    return load_corpus(bundled("toy_twi.txt"))


@pytest.fixture(scope="session")
def overfit_corpus():
    return load_corpus(bundled("overfit64.txt"))


@pytest.fixture(scope="session")
def corpus_1k():
    return load_corpus(bundled("toy_twi_1k.txt"))


@pytest.fixture(scope="session")
def wordpiece(overfit_corpus):
    return train_wordpiece(overfit_corpus, vocab_size=400, min_frequency=1)


@pytest.fixture(scope="session")
def bpe(overfit_corpus):
    return train_bpe(overfit_corpus, vocab_size=400, min_frequency=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# settings under which the tiny bert-flavor model memorises overfit64.txt
OVERFIT_SCHEDULE = dict(epochs=50, batch_size=16, lr=3e-3, max_seq=40, dynamic_masking=False)


@pytest.fixture(scope="session")
def overfit_run(overfit_corpus, wordpiece, tmp_path_factory):
    from lmforge.training import Schedule, pretrain

    out = tmp_path_factory.mktemp("overfit")
    cfg = tiny_config("bert", len(wordpiece))
    report = pretrain(cfg, overfit_corpus, wordpiece, Schedule(seed=0, **OVERFIT_SCHEDULE), out_dir=out)
    return report, out


POSITIVE_WORDS = ["anigye", "ahoɔfɛ", "dɔ", "papa", "ahomeka", "nhyira"]
NEGATIVE_WORDS = ["awerɛhoɔ", "yare", "bɔne", "abufuo", "ɔhaw", "ahometeɛ"]


def disjoint_sentences(words, count, seed):
    r = np.random.default_rng(seed)
    return [" ".join(r.choice(words, size=int(r.integers(3, 7)))) for _ in range(count)]


@pytest.fixture(scope="session")
def disjoint_setup():
    """Tiny model trained on a corpus whose two label classes share no words, plus a 10/10 dataset."""
    from lmforge.corpus import Corpus, SentimentDataset
    from lmforge.training import Schedule, pretrain

    corpus = Corpus.from_sentences(disjoint_sentences(POSITIVE_WORDS, 60, 1) + disjoint_sentences(NEGATIVE_WORDS, 60, 2))
    tok = train_wordpiece(corpus, vocab_size=120, min_frequency=1)
    cfg = tiny_config("distil", len(tok))
    report = pretrain(cfg, corpus, tok, Schedule(epochs=3, batch_size=16, lr=1e-3, max_seq=16, seed=0))
    rows = [(s, "positive") for s in disjoint_sentences(POSITIVE_WORDS, 10, 3)]
    rows += [(s, "negative") for s in disjoint_sentences(NEGATIVE_WORDS, 10, 4)]
    return report.params, cfg, tok, SentimentDataset(tuple(rows))


# -- acceptance summary ---------------------------------------------------------------------

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "ran": False})
    # setup is included so fixture-built models count toward the runtime
    entry["seconds"] += rep.duration
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed or rep.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number:>2}: {e['title']} ({e['seconds']:.1f}s)")
